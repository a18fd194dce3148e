use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{sample_batch, Configurator, GenerativeModel, SimulationBatch};
use crate::nn::{ConditionalFlow, FlowConfig, Mlp};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::Trainable;

use super::{
    augment, augment_correction, cast_named, check_data, check_kind, drop_companions, flow_dim, kind_tensor,
    not_finite, store_named, LikelihoodEstimator, NetworkSettings, CALIBRATION_SIMS,
};

const KIND: f64 = 1.0;

/// Observations taken from each simulated set as training rows. Observations
/// are i.i.d. given θ, so a few per set suffice and keep batches small.
pub const OBS_PER_SET: usize = 4;

/// Training rows for a likelihood network.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodBatch<T> {
    /// Configured observations (plus companions), `[R, flow_dim]`.
    pub targets: Tensor<T>,
    /// Configured parameters, `[R, param_dim]`.
    pub params: Tensor<T>,
    /// Context variates, `[R, context_dim]`.
    pub context: Tensor<T>,
}

/// Conditional flow over single z-scored observations given
/// `[configured θ ∥ context]`, so `log ℓ(x₁..N | θ) = Σᵢ log q(xᵢ | θ)`.
#[derive(Clone, Debug)]
pub struct LikelihoodAmortizer<T> {
    store: ParamStore<T>,
    param_net: Option<Mlp>,
    flow: ConditionalFlow,
    configurator: Option<Configurator>,
    settings: NetworkSettings,
    model_name: String,
    param_dim: usize,
    obs_dim: usize,
    context_dim: usize,
}

impl<T: Scalar> LikelihoodAmortizer<T> {
    pub fn new(model: &dyn GenerativeModel, settings: &NetworkSettings, seed: u64) -> Result<Self> {
        settings.validate()?;
        let (d, o, k) = (model.param_dim(), model.obs_dim(), model.context_dim());
        if d == 0 {
            return Err(Error::Contract(format!("model `{}` has no parameters", model.name())));
        }
        let mut rng = Rng::seed(seed);
        let mut store = ParamStore::new();
        let param_net = match settings.param_embedding {
            Some(e) => {
                let mut widths = vec![d];
                widths.extend_from_slice(&settings.summary_hidden);
                widths.push(e);
                Some(Mlp::new(
                    &mut store,
                    "likelihood.param_net",
                    &widths,
                    settings.summary_activation,
                    false,
                    &mut rng,
                )?)
            }
            None => None,
        };
        let cond_dim = settings.param_embedding.unwrap_or(d) + k;
        let flow_cfg = FlowConfig {
            coupling_layers: settings.coupling_layers,
            hidden: settings.coupling_hidden.clone(),
            clamp: settings.clamp,
            ..FlowConfig::new(flow_dim(o), cond_dim)
        };
        let flow = ConditionalFlow::new(&mut store, "likelihood.flow", &flow_cfg, &mut rng)?;
        Ok(Self {
            store,
            param_net,
            flow,
            configurator: None,
            settings: settings.clone(),
            model_name: model.name().to_owned(),
            param_dim: d,
            obs_dim: o,
            context_dim: k,
        })
    }

    pub fn from_checkpoint(
        model: &dyn GenerativeModel,
        settings: &NetworkSettings,
        named: &[(String, Tensor<f32>)],
    ) -> Result<Self> {
        let mut am = Self::new(model, settings, 0)?;
        check_kind(named, KIND, &am.dims(), "likelihood")?;
        am.store.load_named(&cast_named(named))?;
        am.flow.load_permutations("likelihood.flow", named)?;
        am.configurator = Some(Configurator::from_named("configurator", named)?);
        Ok(am)
    }

    fn dims(&self) -> [usize; 3] {
        [self.param_dim, self.obs_dim, self.context_dim]
    }

    pub fn settings(&self) -> &NetworkSettings {
        &self.settings
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
        if cfg.encode_set_size {
            return Err(Error::Contract(
                "likelihood configurators must not encode the set size".into(),
            ));
        }
        self.configurator = Some(cfg);
        Ok(())
    }

    fn fitted(&self) -> Result<&Configurator> {
        self.configurator
            .as_ref()
            .ok_or_else(|| Error::Contract("likelihood amortizer is untrained (no configurator)".into()))
    }

    /// Flattens up to [`OBS_PER_SET`] observations of every set into rows.
    pub fn configure_batch(&self, batch: &SimulationBatch, rng: &mut Rng) -> Result<LikelihoodBatch<T>> {
        let cfg = self.fitted()?;
        let per = batch.n_obs.min(OBS_PER_SET);
        let (o, d, k) = (self.obs_dim, self.param_dim, self.context_dim);
        let rows = batch.len() * per;
        let (mut x, mut p, mut c) = (Vec::with_capacity(rows * o), Vec::with_capacity(rows * d), Vec::new());
        for b in 0..batch.len() {
            let set = batch.data_row(b);
            for i in 0..per {
                x.extend_from_slice(&set[i * o..(i + 1) * o]);
                p.extend_from_slice(batch.params.row(b));
                c.extend_from_slice(batch.context.row(b));
            }
        }
        let targets = cfg.configure_data::<T>(&Tensor::new(vec![rows, o], x)?)?;
        Ok(LikelihoodBatch {
            targets: augment(targets, o, Some(rng))?,
            params: cfg.configure_params(&Tensor::new(vec![rows, d], p)?)?,
            context: Tensor::from_f64(&[rows, k], &c)?,
        })
    }

    fn conditions(&self, tape: &mut Tape<T>, params: &[Var], theta: &Tensor<T>, context: &Tensor<T>) -> Result<Var> {
        let tv = tape.leaf(theta.clone());
        let tv = match &self.param_net {
            Some(net) => net.forward(tape, params, tv)?,
            None => tv,
        };
        if self.context_dim == 0 {
            return Ok(tv);
        }
        let cv = tape.leaf(context.clone());
        tape.concat(&[tv, cv])
    }

    /// `−mean log q(x | θ)` over all observation rows.
    pub fn likelihood_loss(&self, tape: &mut Tape<T>, params: &[Var], batch: &LikelihoodBatch<T>) -> Result<Var> {
        let cond = self.conditions(tape, params, &batch.params, &batch.context)?;
        let x = tape.leaf(batch.targets.clone());
        let lp = self.flow.log_prob(tape, params, x, cond)?;
        let mean = tape.mean_all(lp)?;
        let loss = tape.neg(mean)?;
        if !tape.value(loss).all_finite() {
            return Err(not_finite("likelihood loss", batch.targets.rows()));
        }
        Ok(loss)
    }

    fn condition_row(&self, context: &[f64], theta: &[f64]) -> Result<Tensor<T>> {
        let cfg = self.fitted()?;
        if theta.len() != self.param_dim {
            return Err(Error::shape("likelihood theta", &[theta.len()], &[self.param_dim]));
        }
        if context.len() != self.context_dim {
            return Err(Error::shape("context", &[context.len()], &[self.context_dim]));
        }
        let t = cfg.configure_params::<T>(&Tensor::from_f64(&[1, self.param_dim], theta)?)?;
        let c = Tensor::from_f64(&[1, self.context_dim], context)?;
        let mut tape = Tape::inference();
        let params = self.store.bind(&mut tape);
        let cond = self.conditions(&mut tape, &params, &t, &c)?;
        Ok(tape.value(cond).clone())
    }

    /// Raw-space log density of each observation (row of `data`) given θ.
    pub fn observation_log_probs(&self, data: &Tensor<f64>, context: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        let n = check_data(data, self.obs_dim, context, self.context_dim)?;
        let cfg = self.fitted()?;
        let cond = self.condition_row(context, theta)?;
        let x = augment(cfg.configure_data::<T>(data)?, self.obs_dim, None)?;
        let lp = self.flow.log_prob_values(&self.store, &x, &cond.repeat_rows(n))?;
        let jac = cfg.data_log_jacobian() + augment_correction(self.obs_dim);
        Ok(lp.data().iter().map(|v| v.to_f64_lossless() + jac).collect())
    }

    /// `Σᵢ log q(xᵢ | θ)` for one data set.
    pub fn log_likelihood(&self, data: &Tensor<f64>, context: &[f64], theta: &[f64]) -> Result<f64> {
        Ok(self.observation_log_probs(data, context, theta)?.iter().sum())
    }

    /// Emulates `n_obs` observations, `[n_obs, obs_dim]` in raw space.
    pub fn emulate(&self, theta: &[f64], context: &[f64], n_obs: usize, rng: &mut Rng) -> Result<Tensor<f64>> {
        let cond = self.condition_row(context, theta)?;
        let x = self.flow.sample(&self.store, &cond, n_obs, rng)?;
        self.fitted()?.deconfigure_data(&drop_companions(x, self.obs_dim)?)
    }
}

impl<T: Scalar> Trainable<T> for LikelihoodAmortizer<T> {
    type Model = dyn GenerativeModel;
    type Batch = LikelihoodBatch<T>;

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
            self.configurator = Some(Configurator::fit(&batches, false)?);
        }
        Ok(())
    }

    fn simulate_batch(
        &self,
        model: &dyn GenerativeModel,
        batch_size: usize,
        rng: &mut Rng,
    ) -> Result<LikelihoodBatch<T>> {
        let batch = sample_batch(model, batch_size, rng)?;
        self.configure_batch(&batch, rng)
    }

    fn loss(&self, tape: &mut Tape<T>, params: &[Var], batch: &LikelihoodBatch<T>) -> Result<Var> {
        self.likelihood_loss(tape, params, batch)
    }

    fn checkpoint_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut named = vec![kind_tensor(KIND, &self.dims())];
        named.extend(store_named(&self.store));
        named.extend(self.flow.permutations_named("likelihood.flow"));
        if let Some(cfg) = &self.configurator {
            named.extend(cfg.to_named("configurator"));
        }
        named
    }
}

impl<T: Scalar> LikelihoodEstimator for LikelihoodAmortizer<T> {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn log_likelihood(&self, data: &Tensor<f64>, context: &[f64], theta: &[f64]) -> Result<f64> {
        LikelihoodAmortizer::log_likelihood(self, data, context, theta)
    }
}
