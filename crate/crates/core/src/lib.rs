//! Scale-invariant crowd counting: a tape autodiff engine, grouped dilated
//! convolutions, the SiT block with its stochastic scale mixer, density-map
//! ground truth, synthetic corpora, training and evaluation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the double-precision variants used by most callers.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod grid;
pub mod groundtruth;
pub mod layers;
pub mod network;
pub mod ops;
pub mod pgm;
pub mod rng;
pub mod scalar;
pub mod sit;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TensorF = tensor::Tensor<f64>;
pub type TapeF = autodiff::Tape<f64>;
pub type ModelF = network::Model<f64>;
pub type SitBlockF = sit::SitBlock<f64>;
/// Single-precision model, the fast path for training.
pub type ModelF32 = network::Model<f32>;
