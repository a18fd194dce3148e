use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Configurator, ModelSet, SimulationBatch};
use crate::nn::{Mlp, SummaryNetwork};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::Trainable;

use super::{
    cast_named, check_data, check_kind, embed_raw_sets, kind_tensor, not_finite, store_named, NetworkSettings,
    SetEmbedder, CALIBRATION_SIMS,
};

const KIND: f64 = 2.0;

/// Labelled data sets for classifier training.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonBatch<T> {
    /// `[B, N, obs_dim]`, z-scored.
    pub sets: Tensor<T>,
    /// `[B, direct_dim]`
    pub direct: Tensor<T>,
    /// Index of the generating model per row.
    pub labels: Vec<usize>,
}

/// Mean softmax cross-entropy of `logits` (`[B, M]`) against `labels`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len(), 0]));
    }
    let m = shape[1];
    let mut onehot = Tensor::<T>::zeros(&[labels.len(), m]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= m {
            return Err(Error::Domain(format!("label {l} out of range for {m} models")));
        }
        onehot.data_mut()[i * m + l] = T::one();
    }
    let lse = tape.logsumexp_rows(logits)?;
    let mask = tape.leaf(onehot);
    let picked = tape.mul(logits, mask)?;
    let picked = tape.sum(picked, 1)?;
    let nll = tape.sub(lse, picked)?;
    tape.mean_all(nll)
}

/// Row-wise softmax computed in `f64` with max subtraction.
pub fn softmax_rows(logits: &Tensor<f64>) -> Result<Tensor<f64>> {
    if logits.rank() != 2 || logits.cols() == 0 {
        return Err(Error::shape("softmax_rows", logits.shape(), &[0, 1]));
    }
    let mut out = Vec::with_capacity(logits.numel());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Summary network plus classifier over `[embedding ∥ direct]`, giving
/// approximate posterior model probabilities.
#[derive(Clone, Debug)]
pub struct ComparisonAmortizer<T> {
    store: ParamStore<T>,
    summary: SummaryNetwork,
    classifier: Mlp,
    configurator: Option<Configurator>,
    settings: NetworkSettings,
    set_name: String,
    model_names: Vec<String>,
    obs_dim: usize,
    context_dim: usize,
}

impl<T: Scalar> ComparisonAmortizer<T> {
    pub fn new(models: &ModelSet, settings: &NetworkSettings, seed: u64) -> Result<Self> {
        settings.validate()?;
        let (o, k, m) = (models.obs_dim(), models.context_dim(), models.len());
        let mut rng = Rng::seed(seed);
        let mut store = ParamStore::new();
        let summary = SummaryNetwork::new(
            &mut store,
            "comparison.summary",
            &settings.phi_widths(o),
            &settings.rho_hidden,
            settings.embedding_dim,
            settings.pooling,
            settings.summary_activation,
            &mut rng,
        )?;
        let mut widths = vec![settings.embedding_dim + k + 1];
        widths.extend_from_slice(&settings.classifier_hidden);
        widths.push(m);
        let classifier = Mlp::new(
            &mut store,
            "comparison.classifier",
            &widths,
            settings.summary_activation,
            false,
            &mut rng,
        )?;
        Ok(Self {
            store,
            summary,
            classifier,
            configurator: None,
            settings: settings.clone(),
            set_name: models.name().to_owned(),
            model_names: models.model_names(),
            obs_dim: o,
            context_dim: k,
        })
    }

    pub fn from_checkpoint(
        models: &ModelSet,
        settings: &NetworkSettings,
        named: &[(String, Tensor<f32>)],
    ) -> Result<Self> {
        let mut am = Self::new(models, settings, 0)?;
        check_kind(named, KIND, &am.dims(), "comparison")?;
        am.store.load_named(&cast_named(named))?;
        am.configurator = Some(Configurator::from_named("configurator", named)?);
        Ok(am)
    }

    fn dims(&self) -> [usize; 3] {
        [self.model_names.len(), self.obs_dim, self.context_dim]
    }

    pub fn model_names(&self) -> &[String] {
        &self.model_names
    }

    pub fn settings(&self) -> &NetworkSettings {
        &self.settings
    }

    pub fn summary_network(&self) -> &SummaryNetwork {
        &self.summary
    }

    pub fn configurator(&self) -> Option<&Configurator> {
        self.configurator.as_ref()
    }

    pub fn set_configurator(&mut self, cfg: Configurator) -> Result<()> {
        if cfg.param_dim() != 0
            || cfg.obs_dim() != self.obs_dim
            || cfg.context_dim != self.context_dim
            || !cfg.encode_set_size
        {
            return Err(Error::Contract(
                "configurator does not match this comparison amortizer".into(),
            ));
        }
        self.configurator = Some(cfg);
        Ok(())
    }

    fn fitted(&self) -> Result<&Configurator> {
        self.configurator
            .as_ref()
            .ok_or_else(|| Error::Contract("comparison amortizer is untrained (no configurator)".into()))
    }

    pub fn configure_batch(&self, batch: &SimulationBatch, labels: Vec<usize>) -> Result<ComparisonBatch<T>> {
        let cfg = self.fitted()?;
        Ok(ComparisonBatch {
            sets: cfg.configure_data(&batch.data)?,
            direct: cfg.direct_conditions(&batch.context, batch.n_obs)?,
            labels,
        })
    }

    /// `[B, M]` logits.
    pub fn logits(&self, tape: &mut Tape<T>, params: &[Var], sets: &Tensor<T>, direct: &Tensor<T>) -> Result<Var> {
        let sv = tape.leaf(sets.clone());
        let emb = self.summary.embed(tape, params, sv)?;
        let dv = tape.leaf(direct.clone());
        let h = tape.concat(&[emb, dv])?;
        self.classifier.forward(tape, params, h)
    }

    pub fn comparison_loss(&self, tape: &mut Tape<T>, params: &[Var], batch: &ComparisonBatch<T>) -> Result<Var> {
        let logits = self.logits(tape, params, &batch.sets, &batch.direct)?;
        let loss = cross_entropy(tape, logits, &batch.labels)?;
        if !tape.value(loss).all_finite() {
            return Err(not_finite("comparison loss", batch.labels.len()));
        }
        Ok(loss)
    }

    /// Approximate posterior model probabilities for one observed data set.
    pub fn predict_pmp(&self, data: &Tensor<f64>, context: &[f64]) -> Result<Vec<f64>> {
        let cfg = self.fitted()?;
        let n = check_data(data, self.obs_dim, context, self.context_dim)?;
        let sets = cfg.configure_data::<T>(&data.clone().reshape(&[1, n, self.obs_dim])?)?;
        let direct = cfg.direct_conditions::<T>(&Tensor::from_f64(&[1, self.context_dim], context)?, n)?;
        let mut tape = Tape::inference();
        let params = self.store.bind(&mut tape);
        let logits = self.logits(&mut tape, &params, &sets, &direct)?;
        let logits: Tensor<f64> = tape.value(logits).cast();
        Ok(softmax_rows(&logits)?.into_data())
    }
}

impl<T: Scalar> Trainable<T> for ComparisonAmortizer<T> {
    type Model = ModelSet;
    type Batch = ComparisonBatch<T>;

    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn prepare(&mut self, models: &ModelSet, rng: &mut Rng) -> Result<()> {
        if models.name() != self.set_name || models.model_names() != self.model_names {
            return Err(Error::Contract(format!(
                "amortizer built for `{}` cannot train on `{}`",
                self.set_name,
                models.name()
            )));
        }
        if self.configurator.is_none() {
            let per = 50;
            let batches = (0..CALIBRATION_SIMS / (per * models.len()))
                .map(|_| models.sample_balanced(per, rng).map(|(b, _)| b))
                .collect::<Result<Vec<_>>>()?;
            self.configurator = Some(Configurator::fit(&batches, true)?);
        }
        Ok(())
    }

    fn simulate_batch(&self, models: &ModelSet, batch_size: usize, rng: &mut Rng) -> Result<ComparisonBatch<T>> {
        let per = (batch_size / models.len()).max(1);
        let (batch, labels) = models.sample_balanced(per, rng)?;
        self.configure_batch(&batch, labels)
    }

    fn loss(&self, tape: &mut Tape<T>, params: &[Var], batch: &ComparisonBatch<T>) -> Result<Var> {
        self.comparison_loss(tape, params, batch)
    }

    fn checkpoint_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut named = vec![kind_tensor(KIND, &self.dims())];
        named.extend(store_named(&self.store));
        if let Some(cfg) = &self.configurator {
            named.extend(cfg.to_named("configurator"));
        }
        named
    }
}

impl<T: Scalar> SetEmbedder for ComparisonAmortizer<T> {
    fn model_name(&self) -> &str {
        &self.set_name
    }

    fn embed_sets(&self, sets: &Tensor<f64>, _context: &Tensor<f64>) -> Result<Tensor<f64>> {
        embed_raw_sets(&self.store, &self.summary, self.fitted()?, sets)
    }
}
