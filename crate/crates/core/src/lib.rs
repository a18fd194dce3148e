//! Amortized simulation-based inference.
//!
//! Train summary networks, conditional normalizing flows and classifiers on
//! simulator output once, then reuse them for near-instant posterior
//! sampling, likelihood emulation, model comparison and model criticism.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`). Networks
//! run in `f32` in production; the `f64` instantiation backs gradient checks
//! and other oracles. The aliases at the crate root name the `f32` types.

pub mod amortizers;
pub mod autodiff;
pub mod csvio;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autodiff::{Pooling, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

/// Amortizers at the precision used for training and inference.
pub type PosteriorAmortizer32 = amortizers::PosteriorAmortizer<f32>;
pub type LikelihoodAmortizer32 = amortizers::LikelihoodAmortizer<f32>;
pub type ComparisonAmortizer32 = amortizers::ComparisonAmortizer<f32>;
