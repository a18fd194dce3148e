//! JSON workflow configuration.
//!
//! Every key is optional; omitted keys take the defaults below. Unknown keys
//! and out-of-range values are rejected with a message naming the key.

use std::path::PathBuf;

use amortflow::amortizers::NetworkSettings;
use amortflow::model::builtin_model;
use amortflow::nn::Activation;
use amortflow::training::{Schedule, TrainConfig, TrainMode};
use amortflow::{Error, Pooling, Result};
use serde::Deserialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmortizerKind {
    Posterior,
    Likelihood,
    Comparison,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingName {
    Mean,
    Sum,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationName {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleName {
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Online,
    Offline,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub embedding_dim: usize,
    pub summary_hidden: Vec<usize>,
    pub summary_features: usize,
    pub rho_hidden: Vec<usize>,
    pub pooling: PoolingName,
    pub summary_activation: ActivationName,
    pub coupling_layers: usize,
    pub coupling_hidden: Vec<usize>,
    pub clamp: f64,
    pub classifier_hidden: Vec<usize>,
    pub param_embedding: Option<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let s = NetworkSettings::default();
        Self {
            embedding_dim: s.embedding_dim,
            summary_hidden: s.summary_hidden,
            summary_features: s.summary_features,
            rho_hidden: s.rho_hidden,
            pooling: PoolingName::Sum,
            summary_activation: ActivationName::Relu,
            coupling_layers: s.coupling_layers,
            coupling_hidden: s.coupling_hidden,
            clamp: s.clamp,
            classifier_hidden: s.classifier_hidden,
            param_embedding: s.param_embedding,
        }
    }
}

impl NetworkConfig {
    pub fn settings(&self) -> NetworkSettings {
        NetworkSettings {
            embedding_dim: self.embedding_dim,
            summary_hidden: self.summary_hidden.clone(),
            summary_features: self.summary_features,
            rho_hidden: self.rho_hidden.clone(),
            pooling: match self.pooling {
                PoolingName::Mean => Pooling::Mean,
                PoolingName::Sum => Pooling::Sum,
                PoolingName::Max => Pooling::Max,
            },
            summary_activation: match self.summary_activation {
                ActivationName::Relu => Activation::Relu,
                ActivationName::Tanh => Activation::Tanh,
            },
            coupling_layers: self.coupling_layers,
            coupling_hidden: self.coupling_hidden.clone(),
            clamp: self.clamp,
            classifier_hidden: self.classifier_hidden.clone(),
            param_embedding: self.param_embedding,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub schedule: ScheduleName,
    pub mode: ModeName,
    pub validation_sims: usize,
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batches_per_epoch: t.batches_per_epoch,
            batch_size: t.batch_size,
            initial_lr: t.initial_lr,
            schedule: ScheduleName::Cosine,
            mode: ModeName::Online,
            validation_sims: t.validation_sims,
            clip_norm: t.clip_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Data sets to simulate.
    pub n_sims: usize,
    /// Observations per set; drawn from the model's range if absent.
    pub n_obs: Option<usize>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            n_sims: 100,
            n_obs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub recovery_sims: usize,
    pub recovery_draws: usize,
    pub sbc_sims: usize,
    pub sbc_draws: usize,
    pub contraction_sims: usize,
    pub contraction_draws: usize,
    /// Fixed set size for all diagnostics; model range if absent.
    pub n_obs: Option<usize>,
    pub null_replicas: usize,
    pub reference_sets: usize,
    /// Observed sets simulated for the misspecification test when no
    /// `--data` is supplied.
    pub misspec_sets: usize,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            recovery_sims: 200,
            recovery_draws: 100,
            sbc_sims: 500,
            sbc_draws: 100,
            contraction_sims: 100,
            contraction_draws: 200,
            n_obs: None,
            null_replicas: 99,
            reference_sets: 200,
            misspec_sets: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    /// Labelled sets simulated per model when no `--data` is supplied.
    pub sets_per_model: usize,
    pub n_obs: Option<usize>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            sets_per_model: 50,
            n_obs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkflowConfig {
    pub model: String,
    pub amortizer: AmortizerKind,
    pub seed: u64,
    pub out: PathBuf,
    pub network: NetworkConfig,
    pub train: TrainSection,
    pub simulate: SimulateSection,
    pub diagnose: DiagnoseSection,
    pub compare: CompareSection,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            model: "conjugate_gaussian".into(),
            amortizer: AmortizerKind::Posterior,
            seed: 0,
            out: PathBuf::from("out"),
            network: NetworkConfig::default(),
            train: TrainSection::default(),
            simulate: SimulateSection::default(),
            diagnose: DiagnoseSection::default(),
            compare: CompareSection::default(),
        }
    }
}

fn at_least(key: &str, value: usize, min: usize) -> Result<()> {
    if value < min {
        return Err(Error::Config(format!("`{key}` must be >= {min}, got {value}")));
    }
    Ok(())
}

impl WorkflowConfig {
    /// Checks ranges and the model/amortizer pairing.
    pub fn validate(&self) -> Result<()> {
        let model = builtin_model(&self.model).map_err(|e| Error::Config(format!("`model`: {e}")))?;
        let needs_set = self.amortizer == AmortizerKind::Comparison;
        let wrong = if needs_set {
            model.set().err()
        } else {
            model.single().err()
        };
        if let Some(e) = wrong {
            return Err(Error::Config(format!("`amortizer`: {e}")));
        }

        let n = &self.network;
        for (key, v) in [
            ("network.embedding_dim", n.embedding_dim),
            ("network.summary_features", n.summary_features),
            ("network.coupling_layers", n.coupling_layers),
        ] {
            at_least(key, v, 1)?;
        }
        for (key, w) in [
            ("network.summary_hidden", &n.summary_hidden),
            ("network.rho_hidden", &n.rho_hidden),
            ("network.coupling_hidden", &n.coupling_hidden),
            ("network.classifier_hidden", &n.classifier_hidden),
        ] {
            if let Some(&bad) = w.iter().find(|&&v| v == 0) {
                return Err(Error::Config(format!("`{key}` widths must be >= 1, got {bad}")));
            }
        }
        if let Some(e) = n.param_embedding {
            at_least("network.param_embedding", e, 1)?;
        }
        if !(n.clamp > 0.0 && n.clamp.is_finite()) {
            return Err(Error::Config(format!("`network.clamp` must be > 0, got {}", n.clamp)));
        }

        let t = &self.train;
        for (key, v) in [
            ("train.epochs", t.epochs),
            ("train.batches_per_epoch", t.batches_per_epoch),
            ("train.batch_size", t.batch_size),
            ("train.validation_sims", t.validation_sims),
        ] {
            at_least(key, v, 1)?;
        }
        if !(t.initial_lr > 0.0 && t.initial_lr.is_finite()) {
            return Err(Error::Config(format!(
                "`train.initial_lr` must be > 0, got {}",
                t.initial_lr
            )));
        }
        if !(t.clip_norm > 0.0 && t.clip_norm.is_finite()) {
            return Err(Error::Config(format!(
                "`train.clip_norm` must be > 0, got {}",
                t.clip_norm
            )));
        }

        at_least("simulate.n_sims", self.simulate.n_sims, 1)?;
        for (key, v) in [
            ("simulate.n_obs", self.simulate.n_obs),
            ("diagnose.n_obs", self.diagnose.n_obs),
            ("compare.n_obs", self.compare.n_obs),
        ] {
            if let Some(v) = v {
                at_least(key, v, 1)?;
            }
        }
        let d = &self.diagnose;
        at_least("diagnose.recovery_sims", d.recovery_sims, 2)?;
        at_least("diagnose.recovery_draws", d.recovery_draws, 1)?;
        at_least("diagnose.sbc_sims", d.sbc_sims, amortflow::diagnostics::SBC_BINS)?;
        at_least("diagnose.sbc_draws", d.sbc_draws, 1)?;
        at_least("diagnose.contraction_sims", d.contraction_sims, 1)?;
        at_least("diagnose.contraction_draws", d.contraction_draws, 2)?;
        at_least(
            "diagnose.null_replicas",
            d.null_replicas,
            amortflow::diagnostics::MIN_NULL_REPLICAS,
        )?;
        at_least("diagnose.reference_sets", d.reference_sets, 2)?;
        at_least("diagnose.misspec_sets", d.misspec_sets, 2)?;
        at_least("compare.sets_per_model", self.compare.sets_per_model, 1)?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batches_per_epoch: t.batches_per_epoch,
            batch_size: t.batch_size,
            initial_lr: t.initial_lr,
            schedule: match t.schedule {
                ScheduleName::Constant => Schedule::Constant,
                ScheduleName::Cosine => Schedule::Cosine,
            },
            seed: self.seed,
            mode: match t.mode {
                ModeName::Online => TrainMode::Online,
                ModeName::Offline => TrainMode::Offline,
            },
            checkpoint: None,
            validation_sims: t.validation_sims,
            clip_norm: t.clip_norm,
        }
    }
}

/// Parses and validates a JSON config. Type errors name the offending key
/// path, e.g. `train.epochs`.
pub fn parse_config(text: &str) -> Result<WorkflowConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: WorkflowConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            Error::Config(e.inner().to_string())
        } else {
            Error::Config(format!("`{path}`: {}", e.inner()))
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}
