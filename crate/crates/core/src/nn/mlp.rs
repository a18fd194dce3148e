use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::glorot;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

/// Fully connected network: affine layers with a hidden activation and a
/// linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<Dense>,
    activation: Activation,
}

impl Mlp {
    /// Registers a new network in `store` under `prefix`. `widths` lists the
    /// input width, hidden widths and output width. With `zero_output` the
    /// final layer starts at zero so the network initially outputs zeros.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        widths: &[usize],
        activation: Activation,
        zero_output: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "{prefix}: an MLP needs at least input and output widths"
            )));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fi, fo) = (widths[i], widths[i + 1]);
                let w = if zero_output && i == n - 1 {
                    Tensor::zeros(&[fi, fo])
                } else {
                    glorot(fi, fo, rng)
                };
                Dense {
                    weight: store.add(format!("{prefix}.dense{i}.weight"), w),
                    bias: store.add(format!("{prefix}.dense{i}.bias"), Tensor::zeros(&[fo])),
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// `Σ (wᵢ·wᵢ₊₁ + wᵢ₊₁)`.
    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Weight and bias ids of layer `i`.
    pub fn layer_params(&self, i: usize) -> (ParamId, ParamId) {
        (self.layers[i].weight, self.layers[i].bias)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `x[batch×in] → [batch×out]` with `params` bound from the owning store.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::shape("mlp_forward", shape, &[self.input_dim()]));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, params[layer.weight.index()])?;
            h = tape.add_row(z, params[layer.bias.index()])?;
            if i < last {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h)?,
                    Activation::Relu => tape.relu(h)?,
                };
            }
        }
        Ok(h)
    }
}
