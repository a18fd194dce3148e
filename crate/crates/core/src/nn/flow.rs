//! Conditional affine-coupling normalizing flow.
//!
//! Each layer permutes the target dimensions, keeps the first `⌈d/2⌉`
//! unchanged and maps the rest as `z_B = θ_B ⊙ exp(s̃) + t`, where `s` and `t`
//! are MLPs of `[θ_A ∥ condition]` and `s̃ = c·tanh(s/c)` is a soft clamp.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Activation, Mlp};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub target_dim: usize,
    pub condition_dim: usize,
    pub coupling_layers: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub clamp: f64,
}

impl FlowConfig {
    pub fn new(target_dim: usize, condition_dim: usize) -> Self {
        Self {
            target_dim,
            condition_dim,
            coupling_layers: 6,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            clamp: 1.9,
        }
    }
}

#[derive(Clone, Debug)]
struct CouplingLayer {
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    scale: Mlp,
    shift: Mlp,
}

#[derive(Clone, Debug)]
pub struct ConditionalFlow {
    layers: Vec<CouplingLayer>,
    target_dim: usize,
    condition_dim: usize,
    split: usize,
    clamp: f64,
}

impl ConditionalFlow {
    /// Registers a flow in `store`. The final layers of every scale and
    /// translation network start at zero, so a new flow is the identity up to
    /// its permutations.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &FlowConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.target_dim;
        if d < 2 {
            return Err(Error::Contract(format!("coupling flows need target_dim >= 2, got {d}")));
        }
        if cfg.coupling_layers == 0 {
            return Err(Error::Config("coupling_layers must be >= 1".into()));
        }
        if !(cfg.clamp > 0.0) {
            return Err(Error::Config(format!("clamp must be > 0, got {}", cfg.clamp)));
        }
        let split = d.div_ceil(2);
        let mut widths = vec![split + cfg.condition_dim];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(d - split);

        // `order[p]` is the original dimension at position p after all
        // permutations so far.
        let mut order: Vec<usize> = (0..d).collect();
        let mut previous: Option<Vec<usize>> = None;
        let mut layers = Vec::with_capacity(cfg.coupling_layers);
        for l in 0..cfg.coupling_layers {
            let perm = loop {
                let p = rng.permutation(d);
                let mut transformed: Vec<usize> = p[split..].iter().map(|&i| order[i]).collect();
                transformed.sort_unstable();
                // consecutive layers must not transform the same dimensions
                if previous.as_ref() != Some(&transformed) {
                    previous = Some(transformed);
                    break p;
                }
            };
            order = perm.iter().map(|&i| order[i]).collect();
            let mut inv_perm = vec![0; d];
            for (pos, &src) in perm.iter().enumerate() {
                inv_perm[src] = pos;
            }
            let scale = Mlp::new(
                store,
                &format!("{prefix}.layer{l}.s"),
                &widths,
                cfg.activation,
                true,
                rng,
            )?;
            let shift = Mlp::new(
                store,
                &format!("{prefix}.layer{l}.t"),
                &widths,
                cfg.activation,
                true,
                rng,
            )?;
            layers.push(CouplingLayer {
                perm,
                inv_perm,
                scale,
                shift,
            });
        }
        Ok(Self {
            layers,
            target_dim: d,
            condition_dim: cfg.condition_dim,
            split,
            clamp: cfg.clamp,
        })
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn condition_dim(&self) -> usize {
        self.condition_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Permutation applied by layer `l`: position `p` takes input column `perm[p]`.
    pub fn permutation(&self, l: usize) -> &[usize] {
        &self.layers[l].perm
    }

    /// Scale and translation networks of layer `l`.
    pub fn layer_networks(&self, l: usize) -> (&Mlp, &Mlp) {
        (&self.layers[l].scale, &self.layers[l].shift)
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    /// Permutations as named `f32` tensors (`{prefix}.layer{l}.perm`), since
    /// they are not trainable parameters but are needed to restore a flow.
    pub fn permutations_named(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let v: Vec<f64> = layer.perm.iter().map(|&p| p as f64).collect();
                (
                    format!("{prefix}.layer{l}.perm"),
                    Tensor::from_f64(&[v.len()], &v).expect("rank 1"),
                )
            })
            .collect()
    }

    /// Restores permutations written by [`ConditionalFlow::permutations_named`].
    pub fn load_permutations(&mut self, prefix: &str, named: &[(String, Tensor<f32>)]) -> Result<()> {
        let mut perms = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let key = format!("{prefix}.layer{l}.perm");
            let t = named
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks `{key}`")))?;
            let perm: Vec<usize> = t.data().iter().map(|&v| v as usize).collect();
            let mut seen = vec![false; self.target_dim];
            let valid = perm.len() == self.target_dim
                && t.data().iter().all(|&v| v >= 0.0 && v.fract() == 0.0)
                && perm
                    .iter()
                    .all(|&p| p < self.target_dim && !std::mem::replace(&mut seen[p], true));
            if !valid {
                return Err(Error::Contract(format!(
                    "`{key}` is not a permutation of 0..{}",
                    self.target_dim
                )));
            }
            perms.push(perm);
        }
        for (layer, perm) in self.layers.iter_mut().zip(perms) {
            for (pos, &src) in perm.iter().enumerate() {
                layer.inv_perm[src] = pos;
            }
            layer.perm = perm;
        }
        Ok(())
    }

    fn check<T: Scalar>(&self, tape: &Tape<T>, x: Var, cond: Var) -> Result<()> {
        let (sx, sc) = (tape.shape(x), tape.shape(cond));
        if sx.len() != 2 || sx[1] != self.target_dim {
            return Err(Error::shape("flow target", sx, &[self.target_dim]));
        }
        if sc.len() != 2 || sc[1] != self.condition_dim || sc[0] != sx[0] {
            return Err(Error::shape("flow condition", sc, &[sx[0], self.condition_dim]));
        }
        Ok(())
    }

    fn scale_and_shift<T: Scalar>(
        &self,
        layer: &CouplingLayer,
        tape: &mut Tape<T>,
        params: &[Var],
        kept: Var,
        cond: Var,
    ) -> Result<(Var, Var)> {
        let h = tape.concat(&[kept, cond])?;
        let raw = layer.scale.forward(tape, params, h)?;
        let squashed = tape.scale(raw, 1.0 / self.clamp);
        let squashed = tape.tanh(squashed)?;
        let s = tape.scale(squashed, self.clamp);
        let t = layer.shift.forward(tape, params, h)?;
        Ok((s, t))
    }

    /// `θ → (z, log|det J|)`; `z` is left in the final permuted order.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], theta: Var, cond: Var) -> Result<(Var, Var)> {
        self.check(tape, theta, cond)?;
        let kept_idx: Vec<usize> = (0..self.split).collect();
        let moved_idx: Vec<usize> = (self.split..self.target_dim).collect();
        let mut x = theta;
        let mut log_det: Option<Var> = None;
        for layer in &self.layers {
            x = tape.columns(x, &layer.perm)?;
            let a = tape.columns(x, &kept_idx)?;
            let b = tape.columns(x, &moved_idx)?;
            let (s, t) = self.scale_and_shift(layer, tape, params, a, cond)?;
            let es = tape.exp(s)?;
            let zb = tape.mul(b, es)?;
            let zb = tape.add(zb, t)?;
            x = tape.concat(&[a, zb])?;
            let ld = tape.sum(s, 1)?;
            log_det = Some(match log_det {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            });
        }
        Ok((x, log_det.expect("at least one layer")))
    }

    /// Exact inverse of [`ConditionalFlow::forward`].
    pub fn inverse<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], z: Var, cond: Var) -> Result<Var> {
        self.check(tape, z, cond)?;
        let kept_idx: Vec<usize> = (0..self.split).collect();
        let moved_idx: Vec<usize> = (self.split..self.target_dim).collect();
        let mut x = z;
        for layer in self.layers.iter().rev() {
            let a = tape.columns(x, &kept_idx)?;
            let zb = tape.columns(x, &moved_idx)?;
            let (s, t) = self.scale_and_shift(layer, tape, params, a, cond)?;
            let centered = tape.sub(zb, t)?;
            let neg_s = tape.neg(s)?;
            let inv_scale = tape.exp(neg_s)?;
            let b = tape.mul(centered, inv_scale)?;
            let joined = tape.concat(&[a, b])?;
            x = tape.columns(joined, &layer.inv_perm)?;
        }
        Ok(x)
    }

    /// `log N(z; 0, I) + log|det J|` per row.
    pub fn log_prob<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], theta: Var, cond: Var) -> Result<Var> {
        let (z, log_det) = self.forward(tape, params, theta, cond)?;
        let sq = tape.mul(z, z)?;
        let norm = tape.sum(sq, 1)?;
        let base = tape.scale(norm, -0.5);
        let base = tape.shift(base, -0.5 * self.target_dim as f64 * LN_2PI);
        tape.add(base, log_det)
    }

    /// Evaluates log densities without recording gradients.
    pub fn log_prob_values<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        theta: &Tensor<T>,
        cond: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let params = store.bind(&mut tape);
        let tv = tape.leaf(theta.clone());
        let cv = tape.leaf(cond.clone());
        let lp = self.log_prob(&mut tape, &params, tv, cv)?;
        Ok(tape.value(lp).clone())
    }

    /// Draws `n` targets for one condition row by inverting standard normal
    /// base samples. Nothing is recorded for differentiation.
    pub fn sample<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cond: &Tensor<T>,
        n: usize,
        rng: &mut Rng,
    ) -> Result<Tensor<T>> {
        if n == 0 {
            return Err(Error::Domain("flow_sample needs n >= 1".into()));
        }
        if cond.numel() != self.condition_dim {
            return Err(Error::shape(
                "flow_sample condition",
                cond.shape(),
                &[1, self.condition_dim],
            ));
        }
        let z = Tensor::from_f64(&[n, self.target_dim], &rng.normals(n * self.target_dim))?;
        self.inverse_values(store, &z, &cond.repeat_rows(n))
    }

    /// Inverts a batch of base points without recording gradients.
    pub fn inverse_values<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        z: &Tensor<T>,
        cond: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let params = store.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let cv = tape.leaf(cond.clone());
        let theta = self.inverse(&mut tape, &params, zv, cv)?;
        Ok(tape.value(theta).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_flow(d: usize, c: usize) -> (ParamStore<f64>, ConditionalFlow) {
        let mut store = ParamStore::new();
        let flow = ConditionalFlow::new(&mut store, "f", &FlowConfig::new(d, c), &mut Rng::seed(4)).unwrap();
        (store, flow)
    }

    fn forward(
        store: &ParamStore<f64>,
        flow: &ConditionalFlow,
        theta: &Tensor<f64>,
        cond: &Tensor<f64>,
    ) -> (Tensor<f64>, Tensor<f64>) {
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let tv = tape.leaf(theta.clone());
        let cv = tape.leaf(cond.clone());
        let (z, ld) = flow.forward(&mut tape, &p, tv, cv).unwrap();
        (tape.value(z).clone(), tape.value(ld).clone())
    }

    #[test]
    fn zero_initialized_flow_is_a_permutation() {
        let (store, flow) = identity_flow(3, 2);
        let theta = Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let cond = Tensor::from_f64(&[2, 2], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let (z, ld) = forward(&store, &flow, &theta, &cond);
        assert!(ld.data().iter().all(|&v| v == 0.0));
        let mut order: Vec<usize> = (0..3).collect();
        for l in 0..flow.num_layers() {
            order = flow.permutation(l).iter().map(|&i| order[i]).collect();
        }
        for r in 0..2 {
            for (p, &src) in order.iter().enumerate() {
                assert_eq!(z.at(r, p), theta.at(r, src));
            }
        }
        let back = flow.inverse_values(&store, &z, &cond).unwrap();
        assert_eq!(back, theta);
    }

    #[test]
    fn closed_form_single_layer() {
        // s̃ ≡ ln 2, t ≡ 1 via the output biases
        let mut store = ParamStore::<f64>::new();
        let cfg = FlowConfig {
            coupling_layers: 1,
            ..FlowConfig::new(2, 1)
        };
        let flow = ConditionalFlow::new(&mut store, "f", &cfg, &mut Rng::seed(0)).unwrap();
        let (s_net, t_net) = flow.layer_networks(0);
        let c = flow.clamp();
        let raw = c * (std::f64::consts::LN_2 / c).atanh();
        let sb = s_net.layer_params(s_net.num_layers() - 1).1;
        let tb = t_net.layer_params(t_net.num_layers() - 1).1;
        *store.get_mut(sb) = Tensor::from_f64(&[1], &[raw]).unwrap();
        *store.get_mut(tb) = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let perm = flow.permutation(0).to_vec();
        // θ_B = 3 lands in the moved slot after permutation
        let mut theta = [0.0; 2];
        theta[perm[1]] = 3.0;
        theta[perm[0]] = -0.4;
        let theta = Tensor::from_f64(&[1, 2], &theta).unwrap();
        let cond = Tensor::from_f64(&[1, 1], &[0.5]).unwrap();
        let (z, ld) = forward(&store, &flow, &theta, &cond);
        assert!((z.at(0, 1) - 7.0).abs() < 1e-12);
        assert!((ld.data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let back = flow.inverse_values(&store, &z, &cond).unwrap();
        assert!((back.data()[perm[1]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn identity_log_prob_at_origin() {
        let (store, flow) = identity_flow(2, 1);
        let lp = flow
            .log_prob_values(&store, &Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 1]))
            .unwrap();
        assert!((lp.data()[0] + LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_target_rejected() {
        let mut store = ParamStore::<f32>::new();
        let r = ConditionalFlow::new(&mut store, "f", &FlowConfig::new(1, 1), &mut Rng::seed(0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn consecutive_layers_alternate_in_two_dims() {
        let (_, flow) = identity_flow(2, 1);
        let mut order = vec![0, 1];
        let mut last = None;
        for l in 0..flow.num_layers() {
            order = flow.permutation(l).iter().map(|&i| order[i]).collect();
            assert_ne!(Some(order[1]), last);
            last = Some(order[1]);
        }
    }

    #[test]
    fn sample_rejects_zero_draws_and_is_deterministic() {
        let (store, flow) = identity_flow(2, 1);
        let cond = Tensor::zeros(&[1, 1]);
        assert!(matches!(
            flow.sample(&store, &cond, 0, &mut Rng::seed(0)),
            Err(Error::Domain(_))
        ));
        let a = flow.sample(&store, &cond, 50, &mut Rng::seed(8)).unwrap();
        let b = flow.sample(&store, &cond, 50, &mut Rng::seed(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permutations_roundtrip_through_named_tensors() {
        let mut rng = Rng::seed(1);
        let mut store = ParamStore::<f64>::new();
        let a = ConditionalFlow::new(&mut store, "f", &FlowConfig::new(5, 1), &mut rng).unwrap();
        let mut b = ConditionalFlow::new(&mut ParamStore::<f64>::new(), "f", &FlowConfig::new(5, 1), &mut rng).unwrap();
        b.load_permutations("f", &a.permutations_named("f")).unwrap();
        for l in 0..a.num_layers() {
            assert_eq!(a.permutation(l), b.permutation(l));
        }
        let mut bad = a.permutations_named("f");
        bad[0].1.data_mut()[0] = bad[0].1.data()[1];
        assert!(matches!(b.load_permutations("f", &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch() {
        let (store, flow) = identity_flow(2, 3);
        let r = flow.log_prob_values(&store, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[4, 2]));
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
