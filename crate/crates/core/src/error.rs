use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("config line {line}: {detail}")]
    ConfigParse { line: usize, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown preset `{name}` (valid presets: {valid})")]
    UnknownPreset { name: String, valid: String },

    #[error("weights file: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("weights file: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("weights file: unsupported dtype code {0}")]
    UnsupportedDType(u8),

    #[error("weights file truncated while reading {0}")]
    Truncated(String),

    #[error("weights file: tensor `{name}` has shape {found:?}, config expects {expected:?}")]
    WeightShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("weights file: tensor `{0}` is not part of this model")]
    UnknownTensor(String),

    #[error("weights file: tensor `{0}` is missing")]
    MissingTensor(String),

    #[error("non-finite gradient for parameter `{name}` at element {index}")]
    NonFiniteGradient { name: String, index: usize },

    #[error("loss became non-finite at iteration {iter}")]
    NonFiniteLoss { iter: usize },

    #[error("OKS undefined: ground truth has no labeled keypoints")]
    NoLabeledKeypoints,

    #[error("annotation record {index}: {detail}")]
    Annotation { index: usize, detail: String },

    #[error("image {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("thread spawn failed: {0}")]
    ThreadSpawn(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }
}
