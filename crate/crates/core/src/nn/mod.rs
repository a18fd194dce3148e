//! Neural building blocks.

mod deepset;
mod flow;
mod mlp;

pub use deepset::SummaryNetwork;
pub use flow::{ConditionalFlow, FlowConfig};
pub use mlp::{Activation, Mlp};

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Glorot-uniform initialization: `U(±√(6/(fan_in+fan_out)))`.
pub(crate) fn glorot<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of((2.0 * rng.uniform() - 1.0) * limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized")
}
