//! Declarative network description, named presets and the text config format.
//!
//! ```text
//! preset = danet72        # optional; starting point for the overrides below
//! input_height = 256
//! input_width = 192
//!
//! [stem]
//! channels = 64
//!
//! [stage1]
//! layers = 3
//! growth = 32
//! bottleneck = 32
//! transition = 96
//! pool = true
//!
//! [head]
//! width = 64
//! keypoints = 17
//! lateral = true
//!
//! [variant]
//! mau = mask              # off | mask | variant1 | variant2
//! cau = oab               # off | oab | variant1 | variant2
//! fusion = sfu            # sum | sfu
//! cau_reduction = 16
//! sfu_hidden = 32
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use crate::blocks::{BlockVariantConfig, CauMode, FusionMode, MauMode};
use crate::error::{Error, Result};

pub const PRESETS: &[&str] = &[
    "danet72",
    "danet88",
    "danet98",
    "danet102",
    "baseline1",
    "baseline2",
    "cau_only",
    "mau_only",
    "sfu_only",
    "cau_mau",
    "tiny",
    "toy",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StemConfig {
    /// Width of both stem convolutions (7×7 stride 2, then 3×3 stride 2).
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageConfig {
    pub layers: usize,
    pub growth: usize,
    pub bottleneck: usize,
    /// Output width of the transition 1×1 conv; also the lateral width.
    pub transition: usize,
    /// 3×3 stride-2 max pool after the transition conv.
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadConfig {
    /// Width of the 3×3 conv before the 1×1 heatmap regressor.
    pub width: usize,
    pub keypoints: usize,
    /// BN-ReLU-conv1×1 refinement of the lateral taps of levels 1–3.
    pub lateral: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DANetConfig {
    /// Preset this config was derived from, if any.
    pub preset: Option<String>,
    pub input_height: usize,
    pub input_width: usize,
    pub stem: StemConfig,
    pub stages: [StageConfig; 4],
    pub head: HeadConfig,
    pub variant: BlockVariantConfig,
    /// Channel attention hidden width is `ceil(C / cau_reduction)`.
    pub cau_reduction: usize,
    /// Hidden width of the fusion weight net.
    pub sfu_hidden: usize,
}

/// Channel arithmetic of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageFlow {
    pub input: usize,
    pub layers: usize,
    pub growth: usize,
    /// `input + layers · growth`
    pub dense_out: usize,
    pub transition: usize,
    /// Spatial size of the stage (and of its lateral tap).
    pub size: (usize, usize),
}

fn stages(layers: [usize; 4], transitions: [usize; 4], growth: usize, bottleneck: usize) -> [StageConfig; 4] {
    std::array::from_fn(|i| StageConfig {
        layers: layers[i],
        growth,
        bottleneck,
        transition: transitions[i],
        pool: i < 3,
    })
}

impl DANetConfig {
    fn standard(name: &str, layers: [usize; 4], transitions: [usize; 4]) -> Self {
        DANetConfig {
            preset: Some(name.to_string()),
            input_height: 256,
            input_width: 192,
            stem: StemConfig { channels: 64 },
            stages: stages(layers, transitions, 32, 32),
            head: HeadConfig { width: 64, keypoints: 17, lateral: true },
            variant: BlockVariantConfig::default(),
            cau_reduction: 16,
            sfu_hidden: 32,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let with_variant = |mau, cau, fusion| {
            let mut c = Self::standard(name, [6, 12, 16, 14], [128, 256, 512, 640]);
            c.variant = BlockVariantConfig { mau, cau, fusion };
            c
        };
        Ok(match name {
            "danet72" => Self::standard(name, [3, 6, 12, 12], [96, 192, 384, 512]),
            "danet88" => Self::standard(name, [4, 5, 18, 14], [128, 192, 512, 640]),
            "danet98" => Self::standard(name, [4, 12, 16, 14], [128, 256, 512, 640]),
            "danet102" => Self::standard(name, [6, 12, 16, 14], [128, 256, 512, 640]),
            "baseline1" => with_variant(MauMode::Off, CauMode::Off, FusionMode::Sum),
            "baseline2" => {
                let mut c = with_variant(MauMode::Off, CauMode::Off, FusionMode::Sum);
                for s in &mut c.stages {
                    s.growth = 64;
                }
                c
            }
            "cau_only" => with_variant(MauMode::Off, CauMode::Oab, FusionMode::Sum),
            "mau_only" => with_variant(MauMode::Mask, CauMode::Off, FusionMode::Sum),
            "sfu_only" => with_variant(MauMode::Off, CauMode::Off, FusionMode::Sfu),
            "cau_mau" => with_variant(MauMode::Mask, CauMode::Oab, FusionMode::Sum),
            "tiny" => DANetConfig {
                preset: Some(name.to_string()),
                input_height: 32,
                input_width: 24,
                stem: StemConfig { channels: 8 },
                stages: stages([1, 1, 1, 1], [8, 8, 8, 8], 8, 8),
                head: HeadConfig { width: 8, keypoints: 17, lateral: true },
                variant: BlockVariantConfig::default(),
                cau_reduction: 4,
                sfu_hidden: 8,
            },
            "toy" => DANetConfig {
                preset: Some(name.to_string()),
                input_height: 128,
                input_width: 96,
                stem: StemConfig { channels: 16 },
                stages: stages([2, 2, 2, 2], [16, 24, 32, 40], 8, 16),
                head: HeadConfig { width: 16, keypoints: 17, lateral: true },
                variant: BlockVariantConfig::default(),
                cau_reduction: 4,
                sfu_hidden: 8,
            },
            other => {
                return Err(Error::UnknownPreset { name: other.to_string(), valid: PRESETS.join(", ") });
            }
        })
    }

    /// Stage-by-stage channel and size arithmetic for the configured input.
    pub fn channel_flow(&self) -> Vec<StageFlow> {
        let mut c = self.stem.channels;
        let mut size = (self.input_height / 4, self.input_width / 4);
        let mut out = Vec::with_capacity(4);
        for s in &self.stages {
            let dense_out = c + s.layers * s.growth;
            out.push(StageFlow { input: c, layers: s.layers, growth: s.growth, dense_out, transition: s.transition, size });
            c = s.transition;
            if s.pool {
                size = (pooled(size.0), pooled(size.1));
            }
        }
        out
    }

    pub fn heatmap_size(&self) -> (usize, usize) {
        (self.input_height / 4, self.input_width / 4)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stem.channels == 0 {
            return bad("stem channels must be positive".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.transition == 0 {
                return bad(format!("stage{} transition width must be positive", i + 1));
            }
            if s.layers > 0 && (s.growth == 0 || s.bottleneck == 0) {
                return bad(format!("stage{} growth and bottleneck must be positive", i + 1));
            }
        }
        // every level below the top halves the resolution so that the
        // bottom-up path can double it back
        if self.stages[..3].iter().any(|s| !s.pool) || self.stages[3].pool {
            return bad("stages 1-3 must pool and stage4 must not".into());
        }
        if self.head.width == 0 || self.head.keypoints == 0 {
            return bad("head width and keypoint count must be positive".into());
        }
        if self.cau_reduction == 0 || self.sfu_hidden == 0 {
            return bad("cau_reduction and sfu_hidden must be positive".into());
        }
        check_input_size(self.input_height, self.input_width)
    }

    /// Config file text that parses back to this config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(p) = &self.preset {
            let _ = writeln!(s, "preset = {p}");
        }
        let _ = writeln!(s, "input_height = {}", self.input_height);
        let _ = writeln!(s, "input_width = {}", self.input_width);
        let _ = writeln!(s, "\n[stem]\nchannels = {}", self.stem.channels);
        for (i, st) in self.stages.iter().enumerate() {
            let _ = writeln!(
                s,
                "\n[stage{}]\nlayers = {}\ngrowth = {}\nbottleneck = {}\ntransition = {}\npool = {}",
                i + 1,
                st.layers,
                st.growth,
                st.bottleneck,
                st.transition,
                st.pool
            );
        }
        let _ = writeln!(
            s,
            "\n[head]\nwidth = {}\nkeypoints = {}\nlateral = {}",
            self.head.width, self.head.keypoints, self.head.lateral
        );
        let _ = writeln!(
            s,
            "\n[variant]\nmau = {}\ncau = {}\nfusion = {}\ncau_reduction = {}\nsfu_hidden = {}",
            self.variant.mau, self.variant.cau, self.variant.fusion, self.cau_reduction, self.sfu_hidden
        );
        s
    }

    /// Parses the config text format. A top-level `preset` (default
    /// `danet102`) supplies every value the file does not set; it must come
    /// before any other key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Option<DANetConfig> = None;
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |detail: String| Error::ConfigParse { line: line_no, detail };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err(format!("malformed section header `{line}`")))?.trim();
                if !matches!(name, "stem" | "stage1" | "stage2" | "stage3" | "stage4" | "head" | "variant") {
                    return Err(err(format!("unknown section `[{name}]`")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() && key == "preset" {
                if cfg.is_some() {
                    return Err(err("`preset` must come before every other key".into()));
                }
                cfg = Some(DANetConfig::preset(value).map_err(|e| err(e.to_string()))?);
                continue;
            }
            let c = cfg.get_or_insert_with(|| DANetConfig::preset("danet102").expect("built-in preset"));
            c.set(&section, key, value).map_err(err)?;
        }
        let cfg = match cfg {
            Some(c) => c,
            None => DANetConfig::preset("danet102")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num(v: &str) -> std::result::Result<usize, String> {
            v.parse().map_err(|_| format!("expected a non-negative integer, got `{v}`"))
        }
        fn flag(v: &str) -> std::result::Result<bool, String> {
            v.parse().map_err(|_| format!("expected true or false, got `{v}`"))
        }
        fn word<E: FromStr<Err = Error>>(v: &str) -> std::result::Result<E, String> {
            v.parse().map_err(|e: Error| e.to_string())
        }
        let unknown = || Err(format!("unknown key `{key}`{}", if section.is_empty() { String::new() } else { format!(" in [{section}]") }));
        match section {
            "" => match key {
                "input_height" => self.input_height = num(value)?,
                "input_width" => self.input_width = num(value)?,
                _ => return unknown(),
            },
            "stem" => match key {
                "channels" => self.stem.channels = num(value)?,
                _ => return unknown(),
            },
            "head" => match key {
                "width" => self.head.width = num(value)?,
                "keypoints" => self.head.keypoints = num(value)?,
                "lateral" => self.head.lateral = flag(value)?,
                _ => return unknown(),
            },
            "variant" => match key {
                "mau" => self.variant.mau = word(value)?,
                "cau" => self.variant.cau = word(value)?,
                "fusion" => self.variant.fusion = word(value)?,
                "cau_reduction" => self.cau_reduction = num(value)?,
                "sfu_hidden" => self.sfu_hidden = num(value)?,
                _ => return unknown(),
            },
            stage => {
                let i: usize = stage["stage".len()..].parse::<usize>().expect("validated section") - 1;
                let s = &mut self.stages[i];
                match key {
                    "layers" => s.layers = num(value)?,
                    "growth" => s.growth = num(value)?,
                    "bottleneck" => s.bottleneck = num(value)?,
                    "transition" => s.transition = num(value)?,
                    "pool" => s.pool = flag(value)?,
                    _ => return unknown(),
                }
            }
        }
        Ok(())
    }
}

fn pooled(n: usize) -> usize {
    // 3×3, stride 2, padding 1
    (n + 2 - 3) / 2 + 1
}

/// Inputs must be at least 4×4 with both sides divisible by 4, so that the
/// heatmaps are exactly a quarter of the input resolution.
pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Config(format!("input size {h}x{w}: both sides must be positive multiples of 4")));
    }
    Ok(())
}
