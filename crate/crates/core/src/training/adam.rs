use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam optimizer state (β₁ = 0.9, β₂ = 0.999, ε = 1e−8).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>], lr: f64) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update. A non-finite gradient leaves parameters and
    /// state untouched and returns a training error.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape("adam_step", &[self.m.len()], &[params.len(), grads.len()]));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in parameter {i}; step {} skipped",
                self.step + 1
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gf = gi.to_f64_lossless();
                let mf = self.beta1 * mi.to_f64_lossless() + (1.0 - self.beta1) * gf;
                let vf = self.beta2 * vi.to_f64_lossless() + (1.0 - self.beta2) * gf * gf;
                *mi = T::of(mf);
                *vi = T::of(vf);
                let update = self.lr * (mf / c1) / ((vf / c2).sqrt() + self.eps);
                *pi = T::of(pi.to_f64_lossless() - update);
            }
        }
        Ok(())
    }

    /// Moment tensors, for inspection.
    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.to_f64_lossless().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}
