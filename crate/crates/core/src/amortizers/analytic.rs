use crate::error::{Error, Result};
use crate::model::{ConjugateGaussian, GenerativeModel};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{check_data, LikelihoodEstimator, PosteriorEstimator};

/// Exact posterior and likelihood of [`ConjugateGaussian`], usable wherever
/// an amortizer is expected. Serves as the reference for diagnostics.
#[derive(Clone, Debug, Default)]
pub struct AnalyticConjugate {
    pub model: ConjugateGaussian,
}

impl AnalyticConjugate {
    fn checked(&self, data: &Tensor<f64>, context: &[f64]) -> Result<usize> {
        check_data(data, ConjugateGaussian::DIM, context, 0)
    }
}

impl PosteriorEstimator for AnalyticConjugate {
    fn model_name(&self) -> &str {
        self.model.name()
    }

    fn param_dim(&self) -> usize {
        ConjugateGaussian::DIM
    }

    fn sample_posterior(
        &self,
        data: &Tensor<f64>,
        context: &[f64],
        n_draws: usize,
        rng: &mut Rng,
    ) -> Result<Tensor<f64>> {
        let n = self.checked(data, context)?;
        if n_draws == 0 {
            return Err(Error::Domain("n_draws must be >= 1".into()));
        }
        let (mean, var) = self.model.posterior(data.data(), n);
        let sd = var.sqrt();
        let draws: Vec<f64> = (0..n_draws)
            .flat_map(|_| mean.iter().map(|m| m + sd * rng.normal()).collect::<Vec<_>>())
            .collect();
        Tensor::new(vec![n_draws, ConjugateGaussian::DIM], draws)
    }

    fn posterior_log_prob(&self, data: &Tensor<f64>, context: &[f64], theta: &Tensor<f64>) -> Result<Vec<f64>> {
        let n = self.checked(data, context)?;
        if theta.rank() != 2 || theta.cols() != ConjugateGaussian::DIM {
            return Err(Error::shape(
                "posterior_log_prob",
                theta.shape(),
                &[0, ConjugateGaussian::DIM],
            ));
        }
        Ok((0..theta.rows())
            .map(|i| self.model.log_posterior(data.data(), n, theta.row(i)))
            .collect())
    }
}

impl LikelihoodEstimator for AnalyticConjugate {
    fn model_name(&self) -> &str {
        self.model.name()
    }

    fn log_likelihood(&self, data: &Tensor<f64>, context: &[f64], theta: &[f64]) -> Result<f64> {
        self.checked(data, context)?;
        if theta.len() != ConjugateGaussian::DIM {
            return Err(Error::shape(
                "log_likelihood",
                &[theta.len()],
                &[ConjugateGaussian::DIM],
            ));
        }
        Ok(self.model.log_likelihood(data.data(), theta))
    }
}
