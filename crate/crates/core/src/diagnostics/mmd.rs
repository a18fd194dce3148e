use crate::amortizers::SetEmbedder;
use crate::error::{Error, Result};
use crate::model::{sample_batch_with_n, GenerativeModel};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Smallest number of null replicas accepted by [`misspecification_test`].
pub const MIN_NULL_REPLICAS: usize = 19;

const BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct MisspecResult {
    pub observed_mmd2: f64,
    pub null_mmd2: Vec<f64>,
    pub p_value: f64,
    pub bandwidth: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased squared maximum mean discrepancy between the rows of `x` and `y`
/// under the Gaussian kernel `exp(−‖a−b‖²/(2σ²))`. May be slightly negative.
pub fn mmd2_unbiased(x: &Tensor<f64>, y: &Tensor<f64>, bandwidth: f64) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols() {
        return Err(Error::shape("mmd2_unbiased", x.shape(), y.shape()));
    }
    let (n, m) = (x.rows(), y.rows());
    if n < 2 || m < 2 {
        return Err(Error::Domain(format!(
            "mmd2_unbiased needs >= 2 rows per sample, got {n} and {m}"
        )));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::Domain(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * bandwidth * bandwidth)).exp();
    let within = |t: &Tensor<f64>| {
        let r = t.rows();
        let mut s = 0.0;
        for i in 0..r {
            for j in (i + 1)..r {
                s += k(t.row(i), t.row(j));
            }
        }
        2.0 * s / (r * (r - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += k(x.row(i), y.row(j));
        }
    }
    Ok(within(x) + within(y) - 2.0 * cross / (n * m) as f64)
}

/// Median pairwise Euclidean distance between rows, floored at 1e−6.
pub fn median_heuristic(x: &Tensor<f64>) -> f64 {
    let r = x.rows();
    let mut d: Vec<f64> = Vec::with_capacity(r * r.saturating_sub(1) / 2);
    for i in 0..r {
        for j in (i + 1)..r {
            d.push(sq_dist(x.row(i), x.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return BANDWIDTH_FLOOR;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    };
    median.max(BANDWIDTH_FLOOR)
}

/// `(1 + #{null ≥ observed}) / (M + 1)`.
pub fn permutation_p_value(observed: f64, null: &[f64]) -> f64 {
    let exceed = null.iter().filter(|&&v| v >= observed).count();
    (1 + exceed) as f64 / (null.len() + 1) as f64
}

/// Tests whether observed sets (`[B, N, obs_dim]`, `B ≥ 2`) look like
/// simulations from `model` in the embedding space of a trained summary
/// network.
///
/// The observed embedding cloud is compared by MMD² with a reference cloud of
/// `n_ref` fresh simulations. The null distribution repeats the comparison
/// with `n_null` clouds of `B` further simulations each, against the same
/// reference.
pub fn misspecification_test(
    embedder: &dyn SetEmbedder,
    model: &dyn GenerativeModel,
    observed: &Tensor<f64>,
    context: &Tensor<f64>,
    n_null: usize,
    n_ref: usize,
    rng: &mut Rng,
) -> Result<MisspecResult> {
    if embedder.model_name() != model.name() {
        return Err(Error::Contract(format!(
            "summary network trained on `{}` cannot criticize `{}`",
            embedder.model_name(),
            model.name()
        )));
    }
    if n_null < MIN_NULL_REPLICAS {
        return Err(Error::Domain(format!(
            "need >= {MIN_NULL_REPLICAS} null replicas, got {n_null}"
        )));
    }
    if observed.rank() != 3 || observed.shape()[0] < 2 || observed.shape()[1] == 0 {
        return Err(Error::Domain(format!(
            "observed sets must be [B >= 2, N >= 1, obs_dim], got {:?}",
            observed.shape()
        )));
    }
    if n_ref < 2 {
        return Err(Error::Domain(format!("n_ref must be >= 2, got {n_ref}")));
    }
    let (b, n) = (observed.shape()[0], observed.shape()[1]);
    let simulate = |count: usize, rng: &mut Rng| -> Result<Tensor<f64>> {
        let batch = sample_batch_with_n(model, count, n, rng)?;
        embedder.embed_sets(&batch.data, &batch.context)
    };
    let reference = simulate(n_ref, rng)?;
    let bandwidth = median_heuristic(&reference);
    let obs_emb = embedder.embed_sets(observed, context)?;
    let observed_mmd2 = mmd2_unbiased(&obs_emb, &reference, bandwidth)?;
    let null_mmd2 = (0..n_null)
        .map(|_| mmd2_unbiased(&simulate(b, rng)?, &reference, bandwidth))
        .collect::<Result<Vec<f64>>>()?;
    Ok(MisspecResult {
        observed_mmd2,
        p_value: permutation_p_value(observed_mmd2, &null_mmd2),
        null_mmd2,
        bandwidth,
    })
}
