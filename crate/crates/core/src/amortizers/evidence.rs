use crate::autodiff::logsumexp;
use crate::error::{Error, Result};
use crate::model::GenerativeModel;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{LikelihoodEstimator, PosteriorEstimator};

/// Posterior draws averaged for the default evidence evaluation point.
pub const EVIDENCE_DRAWS: usize = 256;

/// `log p̂(x) = log ℓ̂(x | θ) + log p(θ) − log q̂(θ | x)`.
///
/// The identity holds at every θ for exact densities. With `theta = None` it
/// is evaluated at the mean of [`EVIDENCE_DRAWS`] posterior draws.
pub fn log_evidence(
    post: &dyn PosteriorEstimator,
    lik: &dyn LikelihoodEstimator,
    model: &dyn GenerativeModel,
    data: &Tensor<f64>,
    context: &[f64],
    theta: Option<&[f64]>,
    rng: &mut Rng,
) -> Result<f64> {
    if post.model_name() != model.name() || lik.model_name() != model.name() {
        return Err(Error::Contract(format!(
            "posterior (`{}`) and likelihood (`{}`) must both be trained on `{}`",
            post.model_name(),
            lik.model_name(),
            model.name()
        )));
    }
    let point = match theta {
        Some(t) => t.to_vec(),
        None => {
            let draws = post.sample_posterior(data, context, EVIDENCE_DRAWS, rng)?;
            let d = draws.cols();
            (0..d)
                .map(|j| (0..draws.rows()).map(|i| draws.at(i, j)).sum::<f64>() / draws.rows() as f64)
                .collect()
        }
    };
    if point.len() != model.param_dim() {
        return Err(Error::shape("log_evidence theta", &[point.len()], &[model.param_dim()]));
    }
    let log_lik = lik.log_likelihood(data, context, &point)?;
    let log_prior = model.prior_log_density(&point);
    let log_post = post.posterior_log_prob(data, context, &Tensor::new(vec![1, point.len()], point.clone())?)?[0];
    Ok(log_lik + log_prior - log_post)
}

/// Expected log predictive density of held-out observations (`[M, obs_dim]`)
/// given an observed set: `Σⱼ log (1/S) Σₛ ℓ̂(x̃ⱼ | θₛ)` with `θₛ` drawn from
/// the approximate posterior.
pub fn expected_log_predictive(
    post: &dyn PosteriorEstimator,
    lik: &dyn LikelihoodEstimator,
    observed: &Tensor<f64>,
    context: &[f64],
    held_out: &Tensor<f64>,
    n_draws: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if post.model_name() != lik.model_name() {
        return Err(Error::Contract(format!(
            "posterior (`{}`) and likelihood (`{}`) disagree on the model",
            post.model_name(),
            lik.model_name()
        )));
    }
    let draws = post.sample_posterior(observed, context, n_draws, rng)?;
    let mut total = 0.0;
    for j in 0..held_out.rows() {
        let x = held_out.select_rows(&[j]);
        let lls = (0..draws.rows())
            .map(|s| lik.log_likelihood(&x, context, draws.row(s)))
            .collect::<Result<Vec<f64>>>()?;
        total += logsumexp(&lls) - (draws.rows() as f64).ln();
    }
    Ok(total)
}
