//! Adapter between raw `f64` simulations and network inputs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::batch::SimulationBatch;

const STD_FLOOR: f64 = 1e-6;

/// Network-ready tensors, partitioned by how they enter an approximator.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfiguredBatch<T> {
    /// Variables whose density is learned, `[rows, target_dim]`.
    pub targets: Tensor<T>,
    /// Sets routed through a summary network, `[rows, n_obs, obs_dim]`.
    pub summary_conditions: Option<Tensor<T>>,
    /// Conditions concatenated raw onto the flow input, `[rows, k]`.
    pub direct_conditions: Tensor<T>,
}

/// Z-scoring statistics plus the routing of context variates.
///
/// Statistics are rounded to `f32` when fitted so that they survive a
/// checkpoint roundtrip bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Configurator {
    pub param_mean: Vec<f64>,
    pub param_std: Vec<f64>,
    pub data_mean: Vec<f64>,
    pub data_std: Vec<f64>,
    pub context_dim: usize,
    /// Append `√N/10` to the direct conditions.
    pub encode_set_size: bool,
}

/// Bounded monotone encoding of the number of observations.
pub fn encode_set_size(n_obs: usize) -> f64 {
    (n_obs as f64).sqrt() / 10.0
}

fn round32(x: f64) -> f64 {
    x as f32 as f64
}

impl Configurator {
    pub fn identity(param_dim: usize, obs_dim: usize, context_dim: usize, encode_set_size: bool) -> Self {
        Self {
            param_mean: vec![0.0; param_dim],
            param_std: vec![1.0; param_dim],
            data_mean: vec![0.0; obs_dim],
            data_std: vec![1.0; obs_dim],
            context_dim,
            encode_set_size,
        }
    }

    /// Per-dimension mean and population standard deviation over all rows
    /// (parameters) and all observations (data), std floored at 1e−6.
    pub fn fit(batches: &[SimulationBatch], encode_set_size: bool) -> Result<Self> {
        let first = batches
            .first()
            .ok_or_else(|| Error::Domain("fit_configurator needs at least one batch".into()))?;
        let rows: usize = batches.iter().map(SimulationBatch::len).sum();
        if rows < 2 {
            return Err(Error::Domain(format!("fit_configurator needs >= 2 rows, got {rows}")));
        }
        let (d, o, k) = (first.param_dim(), first.obs_dim(), first.context_dim());
        for b in batches {
            if b.param_dim() != d || b.obs_dim() != o || b.context_dim() != k {
                return Err(Error::shape("fit_configurator", first.data.shape(), b.data.shape()));
            }
        }
        let params = batches
            .iter()
            .flat_map(|b| b.params.data().chunks(d.max(1)).take(b.len()));
        let (param_mean, param_std) = moments(params, d);
        let data = batches.iter().flat_map(|b| b.data.data().chunks(o.max(1)));
        let (data_mean, data_std) = moments(data, o);
        Ok(Self {
            param_mean,
            param_std,
            data_mean,
            data_std,
            context_dim: k,
            encode_set_size,
        })
    }

    pub fn param_dim(&self) -> usize {
        self.param_mean.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.data_mean.len()
    }

    pub fn direct_dim(&self) -> usize {
        self.context_dim + usize::from(self.encode_set_size)
    }

    fn check(&self, batch: &SimulationBatch) -> Result<()> {
        if batch.param_dim() != self.param_dim()
            || batch.obs_dim() != self.obs_dim()
            || batch.context_dim() != self.context_dim
        {
            return Err(Error::shape(
                "configure",
                &[self.param_dim(), self.obs_dim(), self.context_dim],
                &[batch.param_dim(), batch.obs_dim(), batch.context_dim()],
            ));
        }
        Ok(())
    }

    /// Posterior partition: targets are z-scored parameters, the z-scored data
    /// sets are summary conditions, context (and the set-size encoding) are
    /// direct conditions.
    pub fn configure<T: Scalar>(&self, batch: &SimulationBatch) -> Result<ConfiguredBatch<T>> {
        self.check(batch)?;
        Ok(ConfiguredBatch {
            targets: self.configure_params(&batch.params)?,
            summary_conditions: Some(self.configure_data(&batch.data)?),
            direct_conditions: self.direct_conditions(&batch.context, batch.n_obs)?,
        })
    }

    pub fn configure_params<T: Scalar>(&self, params: &Tensor<f64>) -> Result<Tensor<T>> {
        zscore(params, &self.param_mean, &self.param_std)
    }

    pub fn deconfigure_params<T: Scalar>(&self, z: &Tensor<T>) -> Result<Tensor<f64>> {
        let d = self.param_dim();
        if z.cols() != d {
            return Err(Error::shape("deconfigure", z.shape(), &[d]));
        }
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v.to_f64_lossless() * self.param_std[i % d] + self.param_mean[i % d])
            .collect();
        Tensor::new(z.shape().to_vec(), data)
    }

    /// Z-scores observations of any leading shape whose last axis is `obs_dim`.
    pub fn configure_data<T: Scalar>(&self, data: &Tensor<f64>) -> Result<Tensor<T>> {
        zscore(data, &self.data_mean, &self.data_std)
    }

    pub fn deconfigure_data<T: Scalar>(&self, z: &Tensor<T>) -> Result<Tensor<f64>> {
        let o = self.obs_dim();
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v.to_f64_lossless() * self.data_std[i % o] + self.data_mean[i % o])
            .collect();
        Tensor::new(z.shape().to_vec(), data)
    }

    /// `[context ∥ √N/10]` per row; context passes through unscaled.
    pub fn direct_conditions<T: Scalar>(&self, context: &Tensor<f64>, n_obs: usize) -> Result<Tensor<T>> {
        if context.cols() != self.context_dim && !(self.context_dim == 0 && context.numel() == 0) {
            return Err(Error::shape("direct_conditions", context.shape(), &[self.context_dim]));
        }
        let rows = context.rows();
        let mut out = Vec::with_capacity(rows * self.direct_dim());
        let enc = encode_set_size(n_obs);
        for r in 0..rows {
            if self.context_dim > 0 {
                out.extend(context.row(r).iter().map(|&v| T::of(v)));
            }
            if self.encode_set_size {
                out.push(T::of(enc));
            }
        }
        Tensor::new(vec![rows, self.direct_dim()], out)
    }

    /// `log |∂z/∂θ| = −Σ log σ_θ`.
    pub fn param_log_jacobian(&self) -> f64 {
        -self.param_std.iter().map(|s| s.ln()).sum::<f64>()
    }

    /// `log |∂z/∂x|` for a single observation.
    pub fn data_log_jacobian(&self) -> f64 {
        -self.data_std.iter().map(|s| s.ln()).sum::<f64>()
    }

    /// Statistics as named `f32` tensors for checkpoints.
    pub fn to_named(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        let t = |v: &[f64]| Tensor::<f32>::from_f64(&[v.len()], v).expect("rank 1");
        vec![
            (format!("{prefix}.param_mean"), t(&self.param_mean)),
            (format!("{prefix}.param_std"), t(&self.param_std)),
            (format!("{prefix}.data_mean"), t(&self.data_mean)),
            (format!("{prefix}.data_std"), t(&self.data_std)),
            (
                format!("{prefix}.routing"),
                t(&[self.context_dim as f64, f64::from(u8::from(self.encode_set_size))]),
            ),
        ]
    }

    pub fn from_named(prefix: &str, named: &[(String, Tensor<f32>)]) -> Result<Self> {
        let get = |field: &str| -> Result<Vec<f64>> {
            let key = format!("{prefix}.{field}");
            named
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.to_f64_vec())
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks `{key}`")))
        };
        let routing = get("routing")?;
        if routing.len() != 2 {
            return Err(Error::Contract(format!("malformed `{prefix}.routing`")));
        }
        let cfg = Self {
            param_mean: get("param_mean")?,
            param_std: get("param_std")?,
            data_mean: get("data_mean")?,
            data_std: get("data_std")?,
            context_dim: routing[0] as usize,
            encode_set_size: routing[1] != 0.0,
        };
        if cfg.param_std.iter().chain(&cfg.data_std).any(|s| !(*s > 0.0)) {
            return Err(Error::Contract("configurator std entries must be > 0".into()));
        }
        Ok(cfg)
    }
}

fn moments<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let mut n = 0usize;
    let rows: Vec<&[f64]> = rows.collect();
    for r in &rows {
        for (s, v) in sum.iter_mut().zip(*r) {
            *s += v;
        }
        n += 1;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
    for r in &rows {
        for ((q, v), m) in sq.iter_mut().zip(*r).zip(&mean) {
            *q += (v - m).powi(2);
        }
    }
    let std = sq
        .iter()
        .map(|q| round32((q / n.max(1) as f64).sqrt().max(STD_FLOOR)))
        .collect();
    (mean.into_iter().map(round32).collect(), std)
}

fn zscore<T: Scalar>(x: &Tensor<f64>, mean: &[f64], std: &[f64]) -> Result<Tensor<T>> {
    let d = mean.len();
    let last = x.shape().last().copied().unwrap_or(0);
    if last != d {
        return Err(Error::shape("configure", x.shape(), &[d]));
    }
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| T::of((v - mean[i % d]) / std[i % d]))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_batch, ConjugateGaussian};
    use crate::rng::Rng;

    fn batch_from_params(p: &[f64], d: usize) -> SimulationBatch {
        let b = p.len() / d;
        SimulationBatch {
            params: Tensor::from_f64(&[b, d], p).unwrap(),
            data: Tensor::zeros(&[b, 1, 1]),
            context: Tensor::zeros(&[b, 0]),
            n_obs: 1,
        }
    }

    #[test]
    fn two_point_population_std() {
        let cfg = Configurator::fit(&[batch_from_params(&[-1.0, 1.0], 1)], true).unwrap();
        assert_eq!(cfg.param_mean, vec![0.0]);
        assert_eq!(cfg.param_std, vec![1.0]);
    }

    #[test]
    fn constant_params_floor_std() {
        let cfg = Configurator::fit(&[batch_from_params(&[2.5, 2.5, 2.5], 1)], true).unwrap();
        assert_eq!(cfg.param_mean, vec![2.5]);
        assert_eq!(cfg.param_std, vec![1e-6f32 as f64]);
    }

    #[test]
    fn empty_or_single_row_rejected() {
        assert!(matches!(Configurator::fit(&[], true), Err(Error::Domain(_))));
        assert!(matches!(
            Configurator::fit(&[batch_from_params(&[1.0], 1)], true),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn fitted_batch_is_standardized_and_roundtrips() {
        let m = ConjugateGaussian::default();
        let batch = sample_batch(&m, 4096, &mut Rng::seed(5)).unwrap();
        let cfg = Configurator::fit(std::slice::from_ref(&batch), true).unwrap();
        let c: ConfiguredBatch<f64> = cfg.configure(&batch).unwrap();
        let t = &c.targets;
        let means = t.column_means();
        for (j, m) in means.iter().enumerate() {
            let var = (0..t.rows()).map(|i| (t.at(i, j) - m).powi(2)).sum::<f64>() / t.rows() as f64;
            // statistics are f32-rounded, hence the tolerance
            assert!(m.abs() < 1e-5, "{m}");
            assert!((var.sqrt() - 1.0).abs() < 1e-5);
        }
        let back = cfg.deconfigure_params(&c.targets).unwrap();
        for (a, b) in back.data().iter().zip(batch.params.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let direct = &c.direct_conditions;
        assert_eq!(direct.shape(), &[4096, 1]);
        assert!((direct.at(0, 0) - (batch.n_obs as f64).sqrt() / 10.0).abs() < 1e-15);
    }

    #[test]
    fn empty_context_gives_zero_width_direct_conditions() {
        let m = ConjugateGaussian::default();
        let batch = sample_batch(&m, 8, &mut Rng::seed(5)).unwrap();
        let cfg = Configurator::fit(std::slice::from_ref(&batch), false).unwrap();
        let c: ConfiguredBatch<f32> = cfg.configure(&batch).unwrap();
        assert_eq!(c.direct_conditions.shape(), &[8, 0]);
    }

    #[test]
    fn named_roundtrip() {
        let cfg = Configurator::fit(&[batch_from_params(&[0.3, 1.7, -0.2], 1)], true).unwrap();
        let named = cfg.to_named("cfg");
        assert_eq!(Configurator::from_named("cfg", &named).unwrap(), cfg);
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let cfg = Configurator::identity(3, 2, 0, true);
        let m = ConjugateGaussian::default();
        let batch = sample_batch(&m, 2, &mut Rng::seed(5)).unwrap();
        assert!(matches!(cfg.configure::<f32>(&batch), Err(Error::Shape { .. })));
    }
}
