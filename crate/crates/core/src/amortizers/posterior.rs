use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{sample_batch, Configurator, ConfiguredBatch, GenerativeModel, SimulationBatch};
use crate::nn::{ConditionalFlow, FlowConfig, SummaryNetwork};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::Trainable;

use super::{
    augment, augment_correction, cast_named, check_data, check_kind, drop_companions, embed_raw_sets, flow_dim,
    kind_tensor, not_finite, store_named, NetworkSettings, PosteriorEstimator, SetEmbedder, CALIBRATION_SIMS,
};

const KIND: f64 = 0.0;

/// Summary network plus conditional flow over z-scored parameters, conditioned
/// on `[embedding ∥ direct conditions]`.
#[derive(Clone, Debug)]
pub struct PosteriorAmortizer<T> {
    store: ParamStore<T>,
    summary: SummaryNetwork,
    flow: ConditionalFlow,
    configurator: Option<Configurator>,
    settings: NetworkSettings,
    model_name: String,
    param_dim: usize,
    obs_dim: usize,
    context_dim: usize,
}

impl<T: Scalar> PosteriorAmortizer<T> {
    /// Untrained amortizer for `model`; weights drawn from `seed`.
    pub fn new(model: &dyn GenerativeModel, settings: &NetworkSettings, seed: u64) -> Result<Self> {
        settings.validate()?;
        let (d, o, k) = (model.param_dim(), model.obs_dim(), model.context_dim());
        if d == 0 {
            return Err(Error::Contract(format!("model `{}` has no parameters", model.name())));
        }
        let mut rng = Rng::seed(seed);
        let mut store = ParamStore::new();
        let summary = SummaryNetwork::new(
            &mut store,
            "posterior.summary",
            &settings.phi_widths(o),
            &settings.rho_hidden,
            settings.embedding_dim,
            settings.pooling,
            settings.summary_activation,
            &mut rng,
        )?;
        // direct conditions: context plus the set-size encoding
        let cond_dim = settings.embedding_dim + k + 1;
        let flow_cfg = FlowConfig {
            coupling_layers: settings.coupling_layers,
            hidden: settings.coupling_hidden.clone(),
            clamp: settings.clamp,
            ..FlowConfig::new(flow_dim(d), cond_dim)
        };
        let flow = ConditionalFlow::new(&mut store, "posterior.flow", &flow_cfg, &mut rng)?;
        Ok(Self {
            store,
            summary,
            flow,
            configurator: None,
            settings: settings.clone(),
            model_name: model.name().to_owned(),
            param_dim: d,
            obs_dim: o,
            context_dim: k,
        })
    }

    /// Restores an amortizer written by [`Trainable::checkpoint_tensors`].
    pub fn from_checkpoint(
        model: &dyn GenerativeModel,
        settings: &NetworkSettings,
        named: &[(String, Tensor<f32>)],
    ) -> Result<Self> {
        let mut am = Self::new(model, settings, 0)?;
        check_kind(named, KIND, &am.dims(), "posterior")?;
        am.store.load_named(&cast_named(named))?;
        am.flow.load_permutations("posterior.flow", named)?;
        am.configurator = Some(Configurator::from_named("configurator", named)?);
        Ok(am)
    }

    fn dims(&self) -> [usize; 3] {
        [self.param_dim, self.obs_dim, self.context_dim]
    }

    pub fn settings(&self) -> &NetworkSettings {
        &self.settings
    }

    pub fn summary_network(&self) -> &SummaryNetwork {
        &self.summary
    }

    pub fn flow(&self) -> &ConditionalFlow {
        &self.flow
    }

    pub fn configurator(&self) -> Option<&Configurator> {
        self.configurator.as_ref()
    }

    pub fn set_configurator(&mut self, cfg: Configurator) -> Result<()> {
        if cfg.param_dim() != self.param_dim || cfg.obs_dim() != self.obs_dim || cfg.context_dim != self.context_dim {
            return Err(Error::shape(
                "set_configurator",
                &self.dims(),
                &[cfg.param_dim(), cfg.obs_dim(), cfg.context_dim],
            ));
        }
        if !cfg.encode_set_size {
            return Err(Error::Contract(
                "posterior configurators must encode the set size".into(),
            ));
        }
        self.configurator = Some(cfg);
        Ok(())
    }

    fn fitted(&self) -> Result<&Configurator> {
        self.configurator
            .as_ref()
            .ok_or_else(|| Error::Contract("posterior amortizer is untrained (no configurator)".into()))
    }

    /// Configures a simulated batch for training, with companion noise for
    /// one-dimensional parameters drawn from `rng`.
    pub fn configure_batch(&self, batch: &SimulationBatch, rng: &mut Rng) -> Result<ConfiguredBatch<T>> {
        let mut cb = self.fitted()?.configure::<T>(batch)?;
        cb.targets = augment(cb.targets, self.param_dim, Some(rng))?;
        Ok(cb)
    }

    fn conditions(&self, tape: &mut Tape<T>, params: &[Var], sets: &Tensor<T>, direct: &Tensor<T>) -> Result<Var> {
        let sv = tape.leaf(sets.clone());
        let emb = self.summary.embed(tape, params, sv)?;
        let dv = tape.leaf(direct.clone());
        tape.concat(&[emb, dv])
    }

    /// `−mean log q(θ | x)` over the batch.
    pub fn posterior_loss(&self, tape: &mut Tape<T>, params: &[Var], batch: &ConfiguredBatch<T>) -> Result<Var> {
        let sets = batch
            .summary_conditions
            .as_ref()
            .ok_or_else(|| Error::Contract("posterior batches need summary conditions".into()))?;
        let cond = self.conditions(tape, params, sets, &batch.direct_conditions)?;
        let theta = tape.leaf(batch.targets.clone());
        let lp = self.flow.log_prob(tape, params, theta, cond)?;
        let mean = tape.mean_all(lp)?;
        let loss = tape.neg(mean)?;
        if !tape.value(loss).all_finite() {
            return Err(not_finite("posterior loss", batch.targets.rows()));
        }
        Ok(loss)
    }

    /// Flow condition row for one observed data set.
    fn condition_row(&self, data: &Tensor<f64>, context: &[f64]) -> Result<Tensor<T>> {
        let cfg = self.fitted()?;
        let n = check_data(data, self.obs_dim, context, self.context_dim)?;
        let sets = cfg.configure_data::<T>(&data.clone().reshape(&[1, n, self.obs_dim])?)?;
        let direct = cfg.direct_conditions::<T>(&Tensor::from_f64(&[1, self.context_dim], context)?, n)?;
        let mut tape = Tape::inference();
        let params = self.store.bind(&mut tape);
        let cond = self.conditions(&mut tape, &params, &sets, &direct)?;
        Ok(tape.value(cond).clone())
    }

    /// Draws `n_draws` parameter vectors in raw space.
    pub fn sample(&self, data: &Tensor<f64>, context: &[f64], n_draws: usize, rng: &mut Rng) -> Result<Tensor<f64>> {
        let cond = self.condition_row(data, context)?;
        let z = self.flow.sample(&self.store, &cond, n_draws, rng)?;
        let z = drop_companions(z, self.param_dim)?;
        self.fitted()?.deconfigure_params(&z)
    }

    /// Raw-space log density of each row of `theta`, including the
    /// z-scoring Jacobian.
    pub fn log_prob(&self, data: &Tensor<f64>, context: &[f64], theta: &Tensor<f64>) -> Result<Vec<f64>> {
        if theta.rank() != 2 || theta.cols() != self.param_dim {
            return Err(Error::shape("posterior_log_prob", theta.shape(), &[0, self.param_dim]));
        }
        let cfg = self.fitted()?;
        let cond = self.condition_row(data, context)?;
        let z = augment(cfg.configure_params::<T>(theta)?, self.param_dim, None)?;
        let lp = self
            .flow
            .log_prob_values(&self.store, &z, &cond.repeat_rows(theta.rows()))?;
        let jac = cfg.param_log_jacobian() + augment_correction(self.param_dim);
        Ok(lp.data().iter().map(|v| v.to_f64_lossless() + jac).collect())
    }
}

impl<T: Scalar> Trainable<T> for PosteriorAmortizer<T> {
    type Model = dyn GenerativeModel;
    type Batch = ConfiguredBatch<T>;

    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn prepare(&mut self, model: &dyn GenerativeModel, rng: &mut Rng) -> Result<()> {
        if model.name() != self.model_name {
            return Err(Error::Contract(format!(
                "amortizer built for `{}` cannot train on `{}`",
                self.model_name,
                model.name()
            )));
        }
        if self.configurator.is_none() {
            let batches = (0..CALIBRATION_SIMS / 100)
                .map(|_| sample_batch(model, 100, rng))
                .collect::<Result<Vec<_>>>()?;
            self.configurator = Some(Configurator::fit(&batches, true)?);
        }
        Ok(())
    }

    fn simulate_batch(
        &self,
        model: &dyn GenerativeModel,
        batch_size: usize,
        rng: &mut Rng,
    ) -> Result<ConfiguredBatch<T>> {
        let batch = sample_batch(model, batch_size, rng)?;
        self.configure_batch(&batch, rng)
    }

    fn loss(&self, tape: &mut Tape<T>, params: &[Var], batch: &ConfiguredBatch<T>) -> Result<Var> {
        self.posterior_loss(tape, params, batch)
    }

    fn checkpoint_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut named = vec![kind_tensor(KIND, &self.dims())];
        named.extend(store_named(&self.store));
        named.extend(self.flow.permutations_named("posterior.flow"));
        if let Some(cfg) = &self.configurator {
            named.extend(cfg.to_named("configurator"));
        }
        named
    }
}

impl<T: Scalar> PosteriorEstimator for PosteriorAmortizer<T> {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn param_dim(&self) -> usize {
        self.param_dim
    }

    fn sample_posterior(
        &self,
        data: &Tensor<f64>,
        context: &[f64],
        n_draws: usize,
        rng: &mut Rng,
    ) -> Result<Tensor<f64>> {
        self.sample(data, context, n_draws, rng)
    }

    fn posterior_log_prob(&self, data: &Tensor<f64>, context: &[f64], theta: &Tensor<f64>) -> Result<Vec<f64>> {
        self.log_prob(data, context, theta)
    }
}

impl<T: Scalar> SetEmbedder for PosteriorAmortizer<T> {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn embed_sets(&self, sets: &Tensor<f64>, _context: &Tensor<f64>) -> Result<Tensor<f64>> {
        embed_raw_sets(&self.store, &self.summary, self.fitted()?, sets)
    }
}
