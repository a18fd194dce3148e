use crate::autodiff::{Pooling, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::{Activation, Mlp};

/// DeepSet summary network `ρ(pool(φ(xᵢ)))`.
///
/// Maps a `[batch, set, obs_dim]` tensor to `[batch, embedding_dim]`. The
/// output does not depend on the order of set elements.
#[derive(Clone, Debug)]
pub struct SummaryNetwork {
    phi: Mlp,
    rho: Mlp,
    pooling: Pooling,
}

impl SummaryNetwork {
    /// `phi_widths` maps one observation to the pooled feature space and must
    /// start at `obs_dim`; `rho_hidden` are the hidden widths of ρ.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        phi_widths: &[usize],
        rho_hidden: &[usize],
        embedding_dim: usize,
        pooling: Pooling,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let phi = Mlp::new(store, &format!("{prefix}.phi"), phi_widths, activation, false, rng)?;
        let mut rho_widths = vec![phi.output_dim()];
        rho_widths.extend_from_slice(rho_hidden);
        rho_widths.push(embedding_dim);
        let rho = Mlp::new(store, &format!("{prefix}.rho"), &rho_widths, activation, false, rng)?;
        Ok(Self { phi, rho, pooling })
    }

    pub fn obs_dim(&self) -> usize {
        self.phi.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.rho.output_dim()
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn phi(&self) -> &Mlp {
        &self.phi
    }

    pub fn rho(&self) -> &Mlp {
        &self.rho
    }

    /// Embeds a batch of sets.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], sets: Var) -> Result<Var> {
        let shape = tape.shape(sets).to_vec();
        if shape.len() != 3 || shape[2] != self.obs_dim() {
            return Err(Error::shape("deepset_embed", &shape, &[0, 0, self.obs_dim()]));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        if n == 0 {
            return Err(Error::Domain("cannot embed an empty set".into()));
        }
        let flat = tape.reshape(sets, &[b * n, d])?;
        let h = self.phi.forward(tape, params, flat)?;
        let width = self.phi.output_dim();
        let h = tape.reshape(h, &[b, n, width])?;
        let pooled = tape.pool(self.pooling, h)?;
        self.rho.forward(tape, params, pooled)
    }
}
