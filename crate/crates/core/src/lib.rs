//! DANet: a single-pyramid human pose estimator built from orthogonal
//! attention blocks (dense layers gated by mask and channel attention) and
//! second-order fusion units, together with the heatmap codec, a desk-scale
//! training loop, COCO/MPII metrics, a parameter/FLOP cost model and a
//! throughput benchmark.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the 32-bit instantiations used by the command line.

pub mod scalar;
pub mod error;
pub mod tensor;
pub mod nn;
pub mod blocks;
pub mod model;
pub mod codec;
pub mod train;
pub mod eval;
pub mod bench;
pub mod fsio;
pub mod image;
pub mod infer;
pub mod selftest;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use model::{build_model, DANetConfig, Model};
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
