use crate::amortizers::PosteriorEstimator;
use crate::error::{Error, Result};
use crate::model::{sample_batch_with_n, GenerativeModel};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::special::chi2_sf;

/// Bins used by [`sbc_ranks`] for the uniformity test.
pub const SBC_BINS: usize = 10;

/// One simulated `(θ*, x, context)` triple.
struct Simulated {
    theta: Vec<f64>,
    data: Tensor<f64>,
    context: Vec<f64>,
}

/// Draws `n_sims` single data sets, skipping (and counting) simulator failures.
fn simulate_sets(
    model: &dyn GenerativeModel,
    n_sims: usize,
    n_obs: Option<usize>,
    rng: &mut Rng,
) -> Result<(Vec<Simulated>, usize)> {
    let mut out = Vec::with_capacity(n_sims);
    let mut failed = 0;
    for _ in 0..n_sims {
        let n = n_obs.unwrap_or_else(|| model.sample_set_size(rng));
        match sample_batch_with_n(model, 1, n, rng) {
            Ok(b) => out.push(Simulated {
                theta: b.params.data().to_vec(),
                data: Tensor::new(vec![n, model.obs_dim()], b.data.into_data())?,
                context: b.context.into_data(),
            }),
            Err(Error::Simulation { .. }) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, failed))
}

fn check_model(est: &dyn PosteriorEstimator, model: &dyn GenerativeModel) -> Result<()> {
    if est.model_name() != model.name() || est.param_dim() != model.param_dim() {
        return Err(Error::Contract(format!(
            "estimator for `{}` cannot be checked against `{}`",
            est.model_name(),
            model.name()
        )));
    }
    Ok(())
}

/// Per-column mean and unbiased variance of a draw matrix.
pub fn draw_moments(draws: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (draws.rows(), draws.cols());
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| draws.at(i, j)).sum::<f64>() / n as f64)
        .collect();
    let var = (0..d)
        .map(|j| {
            if n < 2 {
                return 0.0;
            }
            (0..n).map(|i| (draws.at(i, j) - mean[j]).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .collect();
    (mean, var)
}

/// Pearson correlation, or `None` if either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryReport {
    pub param_names: Vec<String>,
    /// `[n_sims, d]`
    pub truth: Tensor<f64>,
    pub post_mean: Tensor<f64>,
    pub post_sd: Tensor<f64>,
    /// `None` where the correlation is undefined (zero variance).
    pub correlation: Vec<Option<f64>>,
    pub rmse: Vec<f64>,
    /// Simulations skipped because the simulator failed.
    pub failed: usize,
}

impl RecoveryReport {
    pub fn from_estimates(
        param_names: Vec<String>,
        truth: Tensor<f64>,
        post_mean: Tensor<f64>,
        post_sd: Tensor<f64>,
    ) -> Result<Self> {
        if truth.shape() != post_mean.shape() || truth.shape() != post_sd.shape() || truth.rank() != 2 {
            return Err(Error::shape("recovery", truth.shape(), post_mean.shape()));
        }
        let d = truth.cols();
        let col = |t: &Tensor<f64>, j: usize| (0..t.rows()).map(|i| t.at(i, j)).collect::<Vec<_>>();
        let correlation = (0..d).map(|j| pearson(&col(&truth, j), &col(&post_mean, j))).collect();
        let rmse = (0..d)
            .map(|j| {
                let se: f64 = (0..truth.rows())
                    .map(|i| (truth.at(i, j) - post_mean.at(i, j)).powi(2))
                    .sum();
                (se / truth.rows().max(1) as f64).sqrt()
            })
            .collect();
        Ok(Self {
            param_names,
            truth,
            post_mean,
            post_sd,
            correlation,
            rmse,
            failed: 0,
        })
    }
}

/// Simulates `n_sims` data sets (with `n_obs` observations, or the model's
/// own set-size distribution if `None`) and compares posterior means of
/// `n_draws` draws against the true parameters.
pub fn recovery(
    est: &dyn PosteriorEstimator,
    model: &dyn GenerativeModel,
    n_sims: usize,
    n_draws: usize,
    n_obs: Option<usize>,
    rng: &mut Rng,
) -> Result<RecoveryReport> {
    check_model(est, model)?;
    if n_sims < 2 || n_draws == 0 {
        return Err(Error::Domain(format!(
            "recovery needs n_sims >= 2 and n_draws >= 1, got {n_sims}, {n_draws}"
        )));
    }
    let (sets, failed) = simulate_sets(model, n_sims, n_obs, rng)?;
    let d = model.param_dim();
    let (mut truth, mut means, mut sds) = (Vec::new(), Vec::new(), Vec::new());
    for s in &sets {
        let draws = est.sample_posterior(&s.data, &s.context, n_draws, rng)?;
        let (m, v) = draw_moments(&draws);
        truth.extend_from_slice(&s.theta);
        means.extend(m);
        sds.extend(v.iter().map(|x| x.sqrt()));
    }
    let rows = sets.len();
    let mut report = RecoveryReport::from_estimates(
        model.param_names(),
        Tensor::new(vec![rows, d], truth)?,
        Tensor::new(vec![rows, d], means)?,
        Tensor::new(vec![rows, d], sds)?,
    )?;
    report.failed = failed;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SbcResult {
    pub param_names: Vec<String>,
    /// `ranks[j][l]`: rank of θ*ⱼ among the draws of simulation `l`.
    pub ranks: Vec<Vec<usize>>,
    pub n_draws: usize,
    pub bins: usize,
    pub chi2: Vec<f64>,
    pub p_value: Vec<f64>,
    pub failed: usize,
}

/// `#{draws < truth}`; ties count as not-less.
pub fn rank_statistic(draws: &[f64], truth: f64) -> usize {
    draws.iter().filter(|&&v| v < truth).count()
}

/// χ² test that ranks in `{0, …, k}` are uniform, using `bins` bins.
///
/// Rank `r` falls in bin `⌊r·B/(k+1)⌋`, so bin sizes differ by at most one
/// value; each bin's expected count is proportional to the number of rank
/// values it covers (exactly `L/B` when `B` divides `k+1`).
pub fn uniformity_test(ranks: &[usize], k: usize, bins: usize) -> Result<(f64, f64)> {
    if bins < 2 {
        return Err(Error::Domain(format!("uniformity test needs >= 2 bins, got {bins}")));
    }
    if bins > k + 1 {
        return Err(Error::Domain(format!(
            "{bins} bins exceed the {} possible ranks",
            k + 1
        )));
    }
    if ranks.is_empty() {
        return Err(Error::Domain("uniformity test needs at least one rank".into()));
    }
    if let Some(r) = ranks.iter().find(|&&r| r > k) {
        return Err(Error::Domain(format!("rank {r} exceeds n_draws {k}")));
    }
    let bin_of = |r: usize| r * bins / (k + 1);
    let mut observed = vec![0usize; bins];
    for &r in ranks {
        observed[bin_of(r)] += 1;
    }
    let mut width = vec![0usize; bins];
    for r in 0..=k {
        width[bin_of(r)] += 1;
    }
    let l = ranks.len() as f64;
    let chi2: f64 = observed
        .iter()
        .zip(&width)
        .map(|(&o, &w)| {
            let e = l * w as f64 / (k + 1) as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    Ok((chi2, chi2_sf(chi2, bins - 1)?))
}

/// Simulation-based calibration: ranks of `n_sims` true parameters among
/// `n_draws` posterior draws each, with a χ² uniformity test per parameter.
pub fn sbc_ranks(
    est: &dyn PosteriorEstimator,
    model: &dyn GenerativeModel,
    n_sims: usize,
    n_draws: usize,
    n_obs: Option<usize>,
    rng: &mut Rng,
) -> Result<SbcResult> {
    check_model(est, model)?;
    if n_draws == 0 || n_sims < SBC_BINS {
        return Err(Error::Domain(format!(
            "SBC needs n_draws >= 1 and n_sims >= {SBC_BINS}, got {n_draws}, {n_sims}"
        )));
    }
    let (sets, failed) = simulate_sets(model, n_sims, n_obs, rng)?;
    let d = model.param_dim();
    let mut ranks = vec![Vec::with_capacity(sets.len()); d];
    for s in &sets {
        let draws = est.sample_posterior(&s.data, &s.context, n_draws, rng)?;
        for (j, rj) in ranks.iter_mut().enumerate() {
            let col: Vec<f64> = (0..n_draws).map(|i| draws.at(i, j)).collect();
            rj.push(rank_statistic(&col, s.theta[j]));
        }
    }
    let bins = SBC_BINS.min(n_draws + 1);
    let tests = ranks
        .iter()
        .map(|r| uniformity_test(r, n_draws, bins))
        .collect::<Result<Vec<_>>>()?;
    Ok(SbcResult {
        param_names: model.param_names(),
        ranks,
        n_draws,
        bins,
        chi2: tests.iter().map(|t| t.0).collect(),
        p_value: tests.iter().map(|t| t.1).collect(),
        failed,
    })
}

/// `1 − mean posterior variance / prior variance` per parameter.
pub fn posterior_contraction(
    est: &dyn PosteriorEstimator,
    model: &dyn GenerativeModel,
    n_sims: usize,
    n_draws: usize,
    n_obs: Option<usize>,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_model(est, model)?;
    let prior = model.prior_variance();
    if prior.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Domain(
            "posterior contraction needs positive prior variances".into(),
        ));
    }
    if n_sims == 0 || n_draws < 2 {
        return Err(Error::Domain(format!(
            "contraction needs n_sims >= 1 and n_draws >= 2, got {n_sims}, {n_draws}"
        )));
    }
    let (sets, _) = simulate_sets(model, n_sims, n_obs, rng)?;
    if sets.is_empty() {
        return Err(Error::Training("every simulation failed".into()));
    }
    let mut acc = vec![0.0; prior.len()];
    for s in &sets {
        let draws = est.sample_posterior(&s.data, &s.context, n_draws, rng)?;
        for (a, v) in acc.iter_mut().zip(draw_moments(&draws).1) {
            *a += v;
        }
    }
    Ok(acc
        .iter()
        .zip(&prior)
        .map(|(a, p)| 1.0 - a / sets.len() as f64 / p)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amortizers::AnalyticConjugate;
    use crate::model::ConjugateGaussian;

    /// Ignores the data and samples the prior.
    struct PriorSampler;

    impl PosteriorEstimator for PriorSampler {
        fn model_name(&self) -> &str {
            "conjugate_gaussian"
        }

        fn param_dim(&self) -> usize {
            2
        }

        fn sample_posterior(&self, _: &Tensor<f64>, _: &[f64], n: usize, rng: &mut Rng) -> Result<Tensor<f64>> {
            Tensor::new(vec![n, 2], rng.normals(2 * n))
        }

        fn posterior_log_prob(&self, _: &Tensor<f64>, _: &[f64], _: &Tensor<f64>) -> Result<Vec<f64>> {
            unimplemented!()
        }
    }

    #[test]
    fn rank_counting_edges() {
        assert_eq!(rank_statistic(&[1.0, 2.0, 3.0], 0.0), 0);
        assert_eq!(rank_statistic(&[1.0, 2.0, 3.0], 4.0), 3);
        assert_eq!(rank_statistic(&[1.0, 2.0, 3.0], 2.0), 1);
    }

    #[test]
    fn uniform_counts_give_zero_statistic() {
        let ranks: Vec<usize> = (0..100).collect();
        let (c, p) = uniformity_test(&ranks, 99, 10).unwrap();
        assert_eq!(c, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn all_ranks_in_one_bin() {
        let (c, _) = uniformity_test(&[3; 100], 99, 10).unwrap();
        assert!((c - 900.0).abs() < 1e-9);
        assert!((c - (90f64.powi(2) + 9.0 * 100.0) / 10.0).abs() < 1e-9);
    }

    #[test]
    fn unequal_bins_use_width_proportional_expectation() {
        // k = 100: 101 rank values, the first bin covers 11 of them
        let ranks: Vec<usize> = (0..=100).collect();
        assert!(uniformity_test(&ranks, 100, 10).unwrap().0 < 1e-12);
    }

    #[test]
    fn degenerate_bins_rejected() {
        assert!(matches!(uniformity_test(&[0, 1], 5, 1), Err(Error::Domain(_))));
        assert!(matches!(uniformity_test(&[7], 5, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn perfect_and_null_recovery() {
        let truth = Tensor::from_f64(&[200, 1], &Rng::seed(1).normals(200)).unwrap();
        let sd = Tensor::zeros(&[200, 1]);
        let perfect =
            RecoveryReport::from_estimates(vec!["a".into()], truth.clone(), truth.clone(), sd.clone()).unwrap();
        assert_eq!(perfect.correlation[0], Some(1.0));
        assert_eq!(perfect.rmse[0], 0.0);
        let noise = Tensor::from_f64(&[200, 1], &Rng::seed(2).normals(200)).unwrap();
        let null = RecoveryReport::from_estimates(vec!["a".into()], truth, noise, sd.clone()).unwrap();
        assert!(null.correlation[0].unwrap().abs() < 0.15);
        let flat =
            RecoveryReport::from_estimates(vec!["a".into()], Tensor::zeros(&[200, 1]), Tensor::zeros(&[200, 1]), sd)
                .unwrap();
        assert_eq!(flat.correlation[0], None);
    }

    #[test]
    fn analytic_recovery_matches_closed_form() {
        let model = ConjugateGaussian::default();
        let r = recovery(
            &AnalyticConjugate::default(),
            &model,
            1000,
            100,
            Some(32),
            &mut Rng::seed(3),
        )
        .unwrap();
        let expected = (32.0f64 / 33.0).sqrt();
        for c in &r.correlation {
            assert!((c.unwrap() - expected).abs() < 0.05);
        }
    }

    #[test]
    fn analytic_sbc_is_calibrated() {
        let model = ConjugateGaussian::default();
        let r = sbc_ranks(
            &AnalyticConjugate::default(),
            &model,
            1000,
            100,
            None,
            &mut Rng::seed(4),
        )
        .unwrap();
        assert!(r.p_value.iter().all(|&p| p > 0.01), "{:?}", r.p_value);
        assert!(r.ranks.iter().flatten().all(|&k| k <= 100));
    }

    #[test]
    fn contraction_closed_forms() {
        let model = ConjugateGaussian::default();
        let oracle = AnalyticConjugate::default();
        let c4 = posterior_contraction(&oracle, &model, 200, 500, Some(4), &mut Rng::seed(5)).unwrap();
        let c64 = posterior_contraction(&oracle, &model, 200, 500, Some(64), &mut Rng::seed(6)).unwrap();
        for (a, b) in c4.iter().zip(&c64) {
            assert!((a - 0.8).abs() < 0.01, "{a}");
            assert!((b - (1.0 - 1.0 / 65.0)).abs() < 0.001, "{b}");
        }
        let prior = posterior_contraction(&PriorSampler, &model, 200, 500, Some(4), &mut Rng::seed(7)).unwrap();
        assert!(prior.iter().all(|c| c.abs() < 0.03), "{prior:?}");
    }

    #[test]
    fn mismatched_model_is_contract_error() {
        let other = crate::model::GaussianMeanVar::default();
        let r = recovery(&AnalyticConjugate::default(), &other, 10, 10, None, &mut Rng::seed(0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
