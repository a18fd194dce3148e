//! Amortized posterior, likelihood and model-comparison approximators.

mod analytic;
mod comparison;
mod evidence;
mod likelihood;
mod posterior;

pub use analytic::AnalyticConjugate;
pub use comparison::{cross_entropy, softmax_rows, ComparisonAmortizer, ComparisonBatch};
pub use evidence::{expected_log_predictive, log_evidence, EVIDENCE_DRAWS};
pub use likelihood::{LikelihoodAmortizer, LikelihoodBatch, OBS_PER_SET};
pub use posterior::PosteriorAmortizer;

use crate::autodiff::Pooling;
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Simulations used to fit a configurator before training.
pub const CALIBRATION_SIMS: usize = 10_000;

/// Anything that can draw from and evaluate an approximate posterior for one
/// observed data set (`[N, obs_dim]` plus a context row).
pub trait PosteriorEstimator: Send + Sync {
    /// Name of the generative model this estimator was built for.
    fn model_name(&self) -> &str;

    fn param_dim(&self) -> usize;

    /// `[n_draws, param_dim]` in raw parameter space.
    fn sample_posterior(
        &self,
        data: &Tensor<f64>,
        context: &[f64],
        n_draws: usize,
        rng: &mut Rng,
    ) -> Result<Tensor<f64>>;

    /// Log density of each row of `theta` (`[m, param_dim]`, raw space).
    fn posterior_log_prob(&self, data: &Tensor<f64>, context: &[f64], theta: &Tensor<f64>) -> Result<Vec<f64>>;
}

/// Anything that evaluates `log p(x₁..N | θ)` for one data set.
pub trait LikelihoodEstimator: Send + Sync {
    fn model_name(&self) -> &str;

    fn log_likelihood(&self, data: &Tensor<f64>, context: &[f64], theta: &[f64]) -> Result<f64>;
}

/// A trained summary network mapping sets to embedding vectors.
pub trait SetEmbedder: Send + Sync {
    fn model_name(&self) -> &str;

    /// Embeds `[B, N, obs_dim]` raw sets with `[B, context_dim]` context,
    /// giving `[B, embedding_dim]`.
    fn embed_sets(&self, sets: &Tensor<f64>, context: &Tensor<f64>) -> Result<Tensor<f64>>;
}

/// Architecture of the summary, flow and classifier networks.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSettings {
    pub embedding_dim: usize,
    /// Hidden widths of the per-observation network φ.
    pub summary_hidden: Vec<usize>,
    /// Width of the pooled feature vector.
    pub summary_features: usize,
    /// Hidden widths of the post-pooling network ρ.
    pub rho_hidden: Vec<usize>,
    pub pooling: Pooling,
    pub summary_activation: Activation,
    pub coupling_layers: usize,
    pub coupling_hidden: Vec<usize>,
    pub clamp: f64,
    pub classifier_hidden: Vec<usize>,
    /// Width of an optional parameter embedding for likelihood networks.
    pub param_embedding: Option<usize>,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        Self {
            embedding_dim: 8,
            summary_hidden: vec![64],
            summary_features: 32,
            rho_hidden: vec![32],
            pooling: Pooling::Sum,
            summary_activation: Activation::Relu,
            coupling_layers: 6,
            coupling_hidden: vec![64, 64],
            clamp: 1.9,
            classifier_hidden: vec![32, 32],
            param_embedding: None,
        }
    }
}

impl NetworkSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_dim", self.embedding_dim),
            ("summary_features", self.summary_features),
            ("coupling_layers", self.coupling_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        let widths = [
            ("summary_hidden", &self.summary_hidden),
            ("rho_hidden", &self.rho_hidden),
            ("coupling_hidden", &self.coupling_hidden),
            ("classifier_hidden", &self.classifier_hidden),
        ];
        for (name, w) in widths {
            if w.contains(&0) {
                return Err(Error::Config(format!("{name} widths must be >= 1")));
            }
        }
        if self.param_embedding == Some(0) {
            return Err(Error::Config("param_embedding must be >= 1".into()));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(Error::Config(format!("clamp must be > 0, got {}", self.clamp)));
        }
        Ok(())
    }

    /// Widths of φ for observations of dimension `obs_dim`.
    pub(crate) fn phi_widths(&self, obs_dim: usize) -> Vec<usize> {
        let mut w = vec![obs_dim];
        w.extend_from_slice(&self.summary_hidden);
        w.push(self.summary_features);
        w
    }
}

/// Coupling flows need at least two target dimensions. One-dimensional
/// targets get an independent `N(0, 1)` companion during training; densities
/// are read off at companion value 0 and the companion is dropped on sampling.
pub(crate) fn flow_dim(target_dim: usize) -> usize {
    target_dim.max(2)
}

/// Appends companion columns: standard normal noise if `rng` is given,
/// zeros otherwise.
pub(crate) fn augment<T: Scalar>(targets: Tensor<T>, target_dim: usize, rng: Option<&mut Rng>) -> Result<Tensor<T>> {
    let extra = flow_dim(target_dim) - target_dim;
    if extra == 0 {
        return Ok(targets);
    }
    let rows = targets.rows();
    let noise = match rng {
        Some(rng) => Tensor::from_f64(&[rows, extra], &rng.normals(rows * extra))?,
        None => Tensor::zeros(&[rows, extra]),
    };
    Tensor::hcat(&[&targets, &noise])
}

/// Correction turning the flow density at companion 0 into the marginal.
pub(crate) fn augment_correction(target_dim: usize) -> f64 {
    0.5 * LN_2PI * (flow_dim(target_dim) - target_dim) as f64
}

pub(crate) fn drop_companions<T: Scalar>(x: Tensor<T>, target_dim: usize) -> Result<Tensor<T>> {
    if x.cols() == target_dim {
        return Ok(x);
    }
    let rows = x.rows();
    let data: Vec<T> = x
        .data()
        .chunks(x.cols())
        .flat_map(|r| r[..target_dim].to_vec())
        .collect();
    Tensor::new(vec![rows, target_dim], data)
}

/// Validates one observed data set, `[N, obs_dim]` with `N ≥ 1`.
pub(crate) fn check_data(data: &Tensor<f64>, obs_dim: usize, context: &[f64], context_dim: usize) -> Result<usize> {
    if data.rank() != 2 || data.cols() != obs_dim {
        return Err(Error::shape("observed data", data.shape(), &[0, obs_dim]));
    }
    if data.rows() == 0 {
        return Err(Error::Domain("observed data set is empty".into()));
    }
    if context.len() != context_dim {
        return Err(Error::shape("context", &[context.len()], &[context_dim]));
    }
    if !data.all_finite() || !context.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("observed data must be finite".into()));
    }
    Ok(data.rows())
}

/// Marker tensor identifying the amortizer kind stored in a checkpoint.
pub(crate) fn kind_tensor(kind: f64, dims: &[usize]) -> (String, Tensor<f32>) {
    let mut v = vec![kind];
    v.extend(dims.iter().map(|&d| d as f64));
    (
        "amortizer.kind".into(),
        Tensor::from_f64(&[v.len()], &v).expect("rank 1"),
    )
}

pub(crate) fn check_kind(named: &[(String, Tensor<f32>)], kind: f64, dims: &[usize], label: &str) -> Result<()> {
    let (_, t) = named
        .iter()
        .find(|(n, _)| n == "amortizer.kind")
        .ok_or_else(|| Error::Contract("checkpoint lacks `amortizer.kind`".into()))?;
    let v = t.to_f64_vec();
    if v.first() != Some(&kind) {
        return Err(Error::Contract(format!("checkpoint does not hold a {label} amortizer")));
    }
    let stored: Vec<usize> = v[1..].iter().map(|&x| x as usize).collect();
    if stored != dims {
        return Err(Error::Contract(format!(
            "checkpoint dimensions {stored:?} do not match the model's {dims:?}"
        )));
    }
    Ok(())
}

/// Parameter tensors from a checkpoint, converted to the working precision.
pub(crate) fn cast_named<T: Scalar>(named: &[(String, Tensor<f32>)]) -> Vec<(String, Tensor<T>)> {
    named.iter().map(|(n, t)| (n.clone(), t.cast())).collect()
}

pub(crate) fn store_named<T: Scalar>(store: &crate::params::ParamStore<T>) -> Vec<(String, Tensor<f32>)> {
    store.named().into_iter().map(|(n, t)| (n, t.cast())).collect()
}

/// Runs a summary network over raw sets after z-scoring them.
pub(crate) fn embed_raw_sets<T: Scalar>(
    store: &crate::params::ParamStore<T>,
    summary: &crate::nn::SummaryNetwork,
    cfg: &crate::model::Configurator,
    sets: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    if sets.rank() != 3 || sets.shape()[2] != cfg.obs_dim() {
        return Err(Error::shape("embed_sets", sets.shape(), &[0, 0, cfg.obs_dim()]));
    }
    let mut tape = crate::autodiff::Tape::inference();
    let params = store.bind(&mut tape);
    let sv = tape.leaf(cfg.configure_data::<T>(sets)?);
    let emb = summary.embed(&mut tape, &params, sv)?;
    Ok(tape.value(emb).cast())
}

pub(crate) fn not_finite(what: &str, rows: usize) -> Error {
    Error::Training(format!("non-finite {what} on a batch of {rows} rows"))
}
