//! Priors, simulators and the configurator: everything between a generative
//! model and the networks that learn from it.

mod batch;
mod builtin;
mod configurator;

pub use batch::{read_batch_csv, sample_batch, sample_batch_with_n, write_batch_csv, SimulationBatch};
pub use builtin::{
    builtin_model, BuiltinModel, ConjugateGaussian, GaussianMeanVar, ModelSet, NormalData, StudentTData,
};
pub use configurator::{Configurator, ConfiguredBatch};

use crate::rng::Rng;

/// A prior coupled with a simulator, plus the context variates it depends on.
///
/// Simulators must be pure functions of `(θ, context, rng state)`.
pub trait GenerativeModel: Send + Sync {
    fn name(&self) -> &str;

    fn param_names(&self) -> Vec<String>;

    fn param_dim(&self) -> usize {
        self.param_names().len()
    }

    /// Width of one observation.
    fn obs_dim(&self) -> usize;

    /// Number of non-set-size context variates per row.
    fn context_dim(&self) -> usize {
        0
    }

    /// Inclusive range of the number of observations per data set.
    fn set_size_range(&self) -> (usize, usize);

    fn sample_set_size(&self, rng: &mut Rng) -> usize {
        let (lo, hi) = self.set_size_range();
        rng.int_inclusive(lo, hi)
    }

    fn sample_context(&self, _n_obs: usize, _rng: &mut Rng) -> Vec<f64> {
        Vec::new()
    }

    fn sample_prior(&self, rng: &mut Rng) -> Vec<f64>;

    fn prior_log_density(&self, theta: &[f64]) -> f64;

    fn prior_variance(&self) -> Vec<f64>;

    /// Simulates `n_obs` observations, row-major `n_obs × obs_dim`.
    fn simulate(&self, theta: &[f64], context: &[f64], n_obs: usize, rng: &mut Rng) -> Vec<f64>;
}
