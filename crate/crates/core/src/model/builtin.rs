//! Built-in test-bed models.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::batch::SimulationBatch;
use super::GenerativeModel;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `μ ∈ ℝ²`, `μ ~ N(0, I)`, `xᵢ ~ N(μ, I)` with `N ∈ {4, …, 64}`.
///
/// The posterior is `N(Σxᵢ/(N+1), I/(N+1))` and each data dimension is
/// marginally `N(0, I_N + 𝟙𝟙ᵀ)`.
#[derive(Clone, Debug)]
pub struct ConjugateGaussian {
    pub min_obs: usize,
    pub max_obs: usize,
}

impl Default for ConjugateGaussian {
    fn default() -> Self {
        Self {
            min_obs: 4,
            max_obs: 64,
        }
    }
}

impl ConjugateGaussian {
    pub const DIM: usize = 2;

    /// Posterior mean and per-dimension variance for `n` observations.
    pub fn posterior(&self, data: &[f64], n: usize) -> (Vec<f64>, f64) {
        let mut sums = [0.0; Self::DIM];
        for obs in data.chunks(Self::DIM).take(n) {
            for (s, x) in sums.iter_mut().zip(obs) {
                *s += x;
            }
        }
        let denom = (n + 1) as f64;
        (sums.iter().map(|s| s / denom).collect(), 1.0 / denom)
    }

    /// Exact log posterior density of `theta`.
    pub fn log_posterior(&self, data: &[f64], n: usize, theta: &[f64]) -> f64 {
        let (mean, var) = self.posterior(data, n);
        theta
            .iter()
            .zip(&mean)
            .map(|(t, m)| -0.5 * (LN_2PI + var.ln()) - 0.5 * (t - m).powi(2) / var)
            .sum()
    }

    pub fn log_likelihood(&self, data: &[f64], theta: &[f64]) -> f64 {
        data.chunks(Self::DIM)
            .map(|obs| {
                obs.iter()
                    .zip(theta)
                    .map(|(x, m)| -0.5 * LN_2PI - 0.5 * (x - m).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Closed-form log marginal likelihood `log p(x)`.
    pub fn log_marginal(&self, data: &[f64], n: usize) -> f64 {
        let nf = n as f64;
        (0..Self::DIM)
            .map(|j| {
                let col: Vec<f64> = data.chunks(Self::DIM).take(n).map(|o| o[j]).collect();
                let sum: f64 = col.iter().sum();
                let sq: f64 = col.iter().map(|v| v * v).sum();
                // Σ⁻¹ = I − 𝟙𝟙ᵀ/(N+1), det Σ = N+1
                let quad = sq - sum * sum / (nf + 1.0);
                -0.5 * nf * LN_2PI - 0.5 * (nf + 1.0).ln() - 0.5 * quad
            })
            .sum()
    }
}

impl GenerativeModel for ConjugateGaussian {
    fn name(&self) -> &str {
        "conjugate_gaussian"
    }

    fn param_names(&self) -> Vec<String> {
        vec!["mu_0".into(), "mu_1".into()]
    }

    fn obs_dim(&self) -> usize {
        Self::DIM
    }

    fn set_size_range(&self) -> (usize, usize) {
        (self.min_obs, self.max_obs)
    }

    fn sample_prior(&self, rng: &mut Rng) -> Vec<f64> {
        rng.normals(Self::DIM)
    }

    fn prior_log_density(&self, theta: &[f64]) -> f64 {
        theta.iter().map(|t| -0.5 * LN_2PI - 0.5 * t * t).sum()
    }

    fn prior_variance(&self) -> Vec<f64> {
        vec![1.0; Self::DIM]
    }

    fn simulate(&self, theta: &[f64], _context: &[f64], n_obs: usize, rng: &mut Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(n_obs * Self::DIM);
        for _ in 0..n_obs {
            out.extend(theta.iter().map(|m| m + rng.normal()));
        }
        out
    }
}

/// `θ = (μ, log σ)` with standard normal priors and `xᵢ ~ N(μ, σ²)`.
#[derive(Clone, Debug)]
pub struct GaussianMeanVar {
    pub min_obs: usize,
    pub max_obs: usize,
}

impl Default for GaussianMeanVar {
    fn default() -> Self {
        Self {
            min_obs: 4,
            max_obs: 64,
        }
    }
}

impl GenerativeModel for GaussianMeanVar {
    fn name(&self) -> &str {
        "gaussian_meanvar"
    }

    fn param_names(&self) -> Vec<String> {
        vec!["mu".into(), "log_sigma".into()]
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn set_size_range(&self) -> (usize, usize) {
        (self.min_obs, self.max_obs)
    }

    fn sample_prior(&self, rng: &mut Rng) -> Vec<f64> {
        rng.normals(2)
    }

    fn prior_log_density(&self, theta: &[f64]) -> f64 {
        theta.iter().map(|t| -0.5 * LN_2PI - 0.5 * t * t).sum()
    }

    fn prior_variance(&self) -> Vec<f64> {
        vec![1.0, 1.0]
    }

    fn simulate(&self, theta: &[f64], _context: &[f64], n_obs: usize, rng: &mut Rng) -> Vec<f64> {
        let sigma = theta[1].exp();
        (0..n_obs).map(|_| rng.normal_with(theta[0], sigma)).collect()
    }
}

/// Parameter-free model with `xᵢ ~ N(0, 1)`.
#[derive(Clone, Debug)]
pub struct NormalData {
    pub min_obs: usize,
    pub max_obs: usize,
}

/// Parameter-free model with `xᵢ ~ Student-t(ν)`.
#[derive(Clone, Debug)]
pub struct StudentTData {
    pub dof: u32,
    pub min_obs: usize,
    pub max_obs: usize,
}

impl GenerativeModel for NormalData {
    fn name(&self) -> &str {
        "normal"
    }

    fn param_names(&self) -> Vec<String> {
        Vec::new()
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn set_size_range(&self) -> (usize, usize) {
        (self.min_obs, self.max_obs)
    }

    fn sample_prior(&self, _rng: &mut Rng) -> Vec<f64> {
        Vec::new()
    }

    fn prior_log_density(&self, _theta: &[f64]) -> f64 {
        0.0
    }

    fn prior_variance(&self) -> Vec<f64> {
        Vec::new()
    }

    fn simulate(&self, _theta: &[f64], _context: &[f64], n_obs: usize, rng: &mut Rng) -> Vec<f64> {
        rng.normals(n_obs)
    }
}

impl GenerativeModel for StudentTData {
    fn name(&self) -> &str {
        "student_t"
    }

    fn param_names(&self) -> Vec<String> {
        Vec::new()
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn set_size_range(&self) -> (usize, usize) {
        (self.min_obs, self.max_obs)
    }

    fn sample_prior(&self, _rng: &mut Rng) -> Vec<f64> {
        Vec::new()
    }

    fn prior_log_density(&self, _theta: &[f64]) -> f64 {
        0.0
    }

    fn prior_variance(&self) -> Vec<f64> {
        Vec::new()
    }

    fn simulate(&self, _theta: &[f64], _context: &[f64], n_obs: usize, rng: &mut Rng) -> Vec<f64> {
        (0..n_obs).map(|_| rng.student_t(self.dof)).collect()
    }
}

/// Competing models with equal prior probabilities and a shared observation
/// space, for training comparison networks.
pub struct ModelSet {
    name: String,
    models: Vec<Box<dyn GenerativeModel>>,
}

impl ModelSet {
    pub fn new(name: impl Into<String>, models: Vec<Box<dyn GenerativeModel>>) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::Config("a model set needs at least two models".into()))?;
        if models.len() < 2 {
            return Err(Error::Config("a model set needs at least two models".into()));
        }
        let (o, k) = (first.obs_dim(), first.context_dim());
        if models.iter().any(|m| m.obs_dim() != o || m.context_dim() != k) {
            return Err(Error::Config(
                "models in a set must share obs_dim and context_dim".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            models,
        })
    }

    /// `N(0,1)` data versus Student-t(3) data.
    pub fn model_pair() -> Self {
        Self::new(
            "model_pair",
            vec![
                Box::new(NormalData {
                    min_obs: 4,
                    max_obs: 64,
                }),
                Box::new(StudentTData {
                    dof: 3,
                    min_obs: 4,
                    max_obs: 64,
                }),
            ],
        )
        .expect("valid pair")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn model_names(&self) -> Vec<String> {
        self.models.iter().map(|m| m.name().to_owned()).collect()
    }

    pub fn model(&self, i: usize) -> &dyn GenerativeModel {
        self.models[i].as_ref()
    }

    pub fn obs_dim(&self) -> usize {
        self.models[0].obs_dim()
    }

    pub fn context_dim(&self) -> usize {
        self.models[0].context_dim()
    }

    pub fn sample_set_size(&self, rng: &mut Rng) -> usize {
        self.models[0].sample_set_size(rng)
    }

    /// Exactly `per_model` rows from each model, in model order, with labels.
    /// Parameters are dropped (`param_dim = 0`) since they differ across models.
    pub fn sample_balanced(&self, per_model: usize, rng: &mut Rng) -> Result<(SimulationBatch, Vec<usize>)> {
        let n_obs = self.sample_set_size(rng);
        self.sample_balanced_with_n(per_model, n_obs, rng)
    }

    pub fn sample_balanced_with_n(
        &self,
        per_model: usize,
        n_obs: usize,
        rng: &mut Rng,
    ) -> Result<(SimulationBatch, Vec<usize>)> {
        if per_model == 0 || n_obs == 0 {
            return Err(Error::Domain(
                "balanced batch needs per_model >= 1 and n_obs >= 1".into(),
            ));
        }
        let (o, k) = (self.obs_dim(), self.context_dim());
        let rows = per_model * self.models.len();
        let mut data = Vec::with_capacity(rows * n_obs * o);
        let mut context = Vec::with_capacity(rows * k);
        let mut labels = Vec::with_capacity(rows);
        for (label, model) in self.models.iter().enumerate() {
            for _ in 0..per_model {
                let mut row_rng = rng.split();
                let ctx = model.sample_context(n_obs, &mut row_rng);
                let theta = model.sample_prior(&mut row_rng);
                let x = model.simulate(&theta, &ctx, n_obs, &mut row_rng);
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(Error::Simulation { theta });
                }
                data.extend_from_slice(&x);
                context.extend_from_slice(&ctx);
                labels.push(label);
            }
        }
        let batch = SimulationBatch {
            params: Tensor::zeros(&[rows, 0]),
            data: Tensor::new(vec![rows, n_obs, o], data)?,
            context: Tensor::new(vec![rows, k], context)?,
            n_obs,
        };
        Ok((batch, labels))
    }
}

/// A model addressable by name from configuration.
pub enum BuiltinModel {
    Single(Box<dyn GenerativeModel>),
    Set(ModelSet),
}

impl BuiltinModel {
    pub fn name(&self) -> &str {
        match self {
            BuiltinModel::Single(m) => m.name(),
            BuiltinModel::Set(s) => s.name(),
        }
    }

    pub fn single(&self) -> Result<&(dyn GenerativeModel + 'static)> {
        match self {
            BuiltinModel::Single(m) => Ok(m.as_ref()),
            BuiltinModel::Set(s) => Err(Error::Config(format!(
                "`{}` is a model set; posterior and likelihood amortizers need a single model",
                s.name()
            ))),
        }
    }

    pub fn set(&self) -> Result<&ModelSet> {
        match self {
            BuiltinModel::Set(s) => Ok(s),
            BuiltinModel::Single(m) => Err(Error::Config(format!(
                "`{}` is a single model; comparison needs a model set",
                m.name()
            ))),
        }
    }
}

/// Looks up `conjugate_gaussian`, `gaussian_meanvar` or `model_pair`.
pub fn builtin_model(name: &str) -> Result<BuiltinModel> {
    match name {
        "conjugate_gaussian" => Ok(BuiltinModel::Single(Box::new(ConjugateGaussian::default()))),
        "gaussian_meanvar" => Ok(BuiltinModel::Single(Box::new(GaussianMeanVar::default()))),
        "model_pair" => Ok(BuiltinModel::Set(ModelSet::model_pair())),
        other => Err(Error::Config(format!(
            "unknown model `{other}` (expected conjugate_gaussian, gaussian_meanvar or model_pair)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_batch;

    #[test]
    fn conjugate_posterior_update() {
        let m = ConjugateGaussian::default();
        // four observations summing to 4 in each dimension
        let data = [0.5, 2.0, 1.5, 1.0, 1.0, 0.0, 1.0, 1.0];
        let (mean, var) = m.posterior(&data, 4);
        assert!((mean[0] - 0.8).abs() < 1e-12 && (mean[1] - 0.8).abs() < 1e-12);
        assert!((var - 0.2).abs() < 1e-12);
    }

    #[test]
    fn log_marginal_matches_bayes_identity() {
        // log p(x) = log p(x|θ) + log p(θ) − log p(θ|x) for any θ
        let m = ConjugateGaussian::default();
        let mut rng = Rng::seed(1);
        let data = rng.normals(2 * 8);
        for theta in [[0.0, 0.0], [0.3, -1.2], [2.0, 1.0]] {
            let rhs = m.log_likelihood(&data, &theta) + m.prior_log_density(&theta) - m.log_posterior(&data, 8, &theta);
            assert!((m.log_marginal(&data, 8) - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn prior_mean_clt() {
        let m = ConjugateGaussian::default();
        let b = 10_000;
        let batch = sample_batch(&m, b, &mut Rng::seed(3)).unwrap();
        for (mean, tol) in batch.params.column_means().iter().zip([4.0 / (b as f64).sqrt(); 2]) {
            assert!(mean.abs() < tol, "{mean}");
        }
    }

    #[test]
    fn model_pair_balanced() {
        let set = ModelSet::model_pair();
        let (batch, labels) = set.sample_balanced(25, &mut Rng::seed(4)).unwrap();
        assert_eq!(batch.len(), 50);
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 25);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 25);
        assert_eq!(batch.param_dim(), 0);
    }

    #[test]
    fn unknown_builtin_is_config_error() {
        assert!(matches!(builtin_model("nope"), Err(Error::Config(_))));
        assert!(builtin_model("model_pair").unwrap().single().is_err());
        assert!(builtin_model("gaussian_meanvar").unwrap().set().is_err());
    }
}
