use std::path::Path;

use crate::csvio::{fmt_e8, parse_f64, read_table, write_table};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::GenerativeModel;

/// Paired draws from a generative model. Every row shares the same set size.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationBatch {
    /// `[B, param_dim]`
    pub params: Tensor<f64>,
    /// `[B, n_obs, obs_dim]`
    pub data: Tensor<f64>,
    /// `[B, context_dim]`
    pub context: Tensor<f64>,
    pub n_obs: usize,
}

impl SimulationBatch {
    pub fn len(&self) -> usize {
        self.params.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn param_dim(&self) -> usize {
        self.params.shape()[1]
    }

    pub fn obs_dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn context_dim(&self) -> usize {
        self.context.shape()[1]
    }

    /// Observations of row `i`, `n_obs × obs_dim` row-major.
    pub fn data_row(&self, i: usize) -> &[f64] {
        let w = self.n_obs * self.obs_dim();
        &self.data.data()[i * w..(i + 1) * w]
    }

    /// Row `i` as its own single-row batch.
    pub fn row(&self, i: usize) -> SimulationBatch {
        self.select(&[i])
    }

    pub fn select(&self, idx: &[usize]) -> SimulationBatch {
        SimulationBatch {
            params: self.params.select_rows(idx),
            data: self.data.select_rows(idx),
            context: self.context.select_rows(idx),
            n_obs: self.n_obs,
        }
    }

    /// Concatenates batches with equal set size along the row axis.
    pub fn concat(parts: &[SimulationBatch]) -> Result<SimulationBatch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain("concat of zero batches".into()))?;
        let (n, d, o, k) = (first.n_obs, first.param_dim(), first.obs_dim(), first.context_dim());
        let (mut p, mut x, mut c) = (Vec::new(), Vec::new(), Vec::new());
        let mut rows = 0;
        for b in parts {
            if b.n_obs != n || b.param_dim() != d || b.obs_dim() != o || b.context_dim() != k {
                return Err(Error::shape("batch concat", first.data.shape(), b.data.shape()));
            }
            p.extend_from_slice(b.params.data());
            x.extend_from_slice(b.data.data());
            c.extend_from_slice(b.context.data());
            rows += b.len();
        }
        Ok(SimulationBatch {
            params: Tensor::new(vec![rows, d], p)?,
            data: Tensor::new(vec![rows, n, o], x)?,
            context: Tensor::new(vec![rows, k], c)?,
            n_obs: n,
        })
    }
}

/// Draws a batch: one set size for the whole batch, then per row a context,
/// a prior draw and a simulation, each row from its own child stream.
pub fn sample_batch(model: &dyn GenerativeModel, batch_size: usize, rng: &mut Rng) -> Result<SimulationBatch> {
    let n_obs = model.sample_set_size(rng);
    sample_batch_with_n(model, batch_size, n_obs, rng)
}

/// As [`sample_batch`] with a fixed number of observations per data set.
pub fn sample_batch_with_n(
    model: &dyn GenerativeModel,
    batch_size: usize,
    n_obs: usize,
    rng: &mut Rng,
) -> Result<SimulationBatch> {
    if batch_size == 0 {
        return Err(Error::Domain("batch_size must be >= 1".into()));
    }
    if n_obs == 0 {
        return Err(Error::Domain("data sets need at least one observation".into()));
    }
    let (d, o, k) = (model.param_dim(), model.obs_dim(), model.context_dim());
    let mut params = Vec::with_capacity(batch_size * d);
    let mut data = Vec::with_capacity(batch_size * n_obs * o);
    let mut context = Vec::with_capacity(batch_size * k);
    for _ in 0..batch_size {
        let mut row_rng = rng.split();
        let ctx = model.sample_context(n_obs, &mut row_rng);
        let theta = model.sample_prior(&mut row_rng);
        let x = model.simulate(&theta, &ctx, n_obs, &mut row_rng);
        if x.len() != n_obs * o || ctx.len() != k || theta.len() != d {
            return Err(Error::Contract(format!(
                "model `{}` returned mis-sized draws",
                model.name()
            )));
        }
        if !x.iter().chain(&ctx).chain(&theta).all(|v| v.is_finite()) {
            return Err(Error::Simulation { theta });
        }
        params.extend_from_slice(&theta);
        data.extend_from_slice(&x);
        context.extend_from_slice(&ctx);
    }
    Ok(SimulationBatch {
        params: Tensor::new(vec![batch_size, d], params)?,
        data: Tensor::new(vec![batch_size, n_obs, o], data)?,
        context: Tensor::new(vec![batch_size, k], context)?,
        n_obs,
    })
}

/// Writes `param_*, data_<i>_<j>, context_*` columns, one row per draw.
pub fn write_batch_csv(path: &Path, batch: &SimulationBatch) -> Result<()> {
    let (d, o, k) = (batch.param_dim(), batch.obs_dim(), batch.context_dim());
    let mut header: Vec<String> = (0..d).map(|j| format!("param_{j}")).collect();
    for i in 0..batch.n_obs {
        header.extend((0..o).map(|j| format!("data_{i}_{j}")));
    }
    header.extend((0..k).map(|j| format!("context_{j}")));
    let rows: Vec<Vec<String>> = (0..batch.len())
        .map(|r| {
            batch
                .params
                .row(r)
                .iter()
                .chain(batch.data_row(r))
                .chain(batch.context.row(r))
                .map(|&v| fmt_e8(v))
                .collect()
        })
        .collect();
    write_table(path, &header, &rows)
}

/// Reads a batch written by [`write_batch_csv`]; dimensions come from the header.
pub fn read_batch_csv(path: &Path) -> Result<SimulationBatch> {
    let (header, rows) = read_table(path)?;
    let mut d = 0;
    let mut k = 0;
    let (mut n, mut o) = (0usize, 0usize);
    for h in &header {
        if h.starts_with("param_") {
            d += 1;
        } else if h.starts_with("context_") {
            k += 1;
        } else if let Some(rest) = h.strip_prefix("data_") {
            let (i, j) = rest
                .split_once('_')
                .and_then(|(i, j)| Some((i.parse::<usize>().ok()?, j.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::Csv(format!("bad data column `{h}`")))?;
            n = n.max(i + 1);
            o = o.max(j + 1);
        } else {
            return Err(Error::Csv(format!("unexpected column `{h}` in {}", path.display())));
        }
    }
    if n * o + d + k != header.len() || n == 0 {
        return Err(Error::Csv(format!("inconsistent batch header in {}", path.display())));
    }
    let b = rows.len();
    let (mut params, mut data, mut context) = (Vec::new(), Vec::new(), Vec::new());
    for row in &rows {
        if row.len() != header.len() {
            return Err(Error::Csv(format!("ragged row in {}", path.display())));
        }
        let vals = row.iter().map(|f| parse_f64(f)).collect::<Result<Vec<_>>>()?;
        params.extend_from_slice(&vals[..d]);
        data.extend_from_slice(&vals[d..d + n * o]);
        context.extend_from_slice(&vals[d + n * o..]);
    }
    Ok(SimulationBatch {
        params: Tensor::new(vec![b, d], params)?,
        data: Tensor::new(vec![b, n, o], data)?,
        context: Tensor::new(vec![b, k], context)?,
        n_obs: n,
    })
}
