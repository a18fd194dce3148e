#![allow(dead_code)]

use amortflow::amortizers::{ComparisonAmortizer, LikelihoodAmortizer, NetworkSettings, PosteriorAmortizer};
use amortflow::model::{ConjugateGaussian, GaussianMeanVar, GenerativeModel, ModelSet};
use amortflow::nn::{Activation, ConditionalFlow, FlowConfig};
use amortflow::training::{train, TrainConfig, TrainHistory};
use amortflow::{ParamStore, Rng, Scalar, Tensor};

/// Overwrites every parameter with `N(0, sd²)` noise so the flow is far from
/// its identity initialization.
pub fn perturb<T: Scalar>(store: &mut ParamStore<T>, sd: f64, rng: &mut Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = T::of(sd * rng.normal());
        }
    }
}

pub fn random_flow<T: Scalar>(
    target_dim: usize,
    condition_dim: usize,
    layers: usize,
    sd: f64,
    rng: &mut Rng,
) -> (ParamStore<T>, ConditionalFlow) {
    let mut store = ParamStore::new();
    let cfg = FlowConfig {
        coupling_layers: layers,
        hidden: vec![16, 16],
        activation: Activation::Tanh,
        ..FlowConfig::new(target_dim, condition_dim)
    };
    let flow = ConditionalFlow::new(&mut store, "flow", &cfg, rng).unwrap();
    perturb(&mut store, sd, rng);
    (store, flow)
}

/// Midpoint-rule mass of `exp(log_prob)` over `[-h, h]²` with `n²` cells.
pub fn grid_mass(store: &ParamStore<f64>, flow: &ConditionalFlow, cond: &[f64], h: f64, n: usize) -> f64 {
    let step = 2.0 * h / n as f64;
    let mut pts = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for j in 0..n {
            pts.push(-h + (i as f64 + 0.5) * step);
            pts.push(-h + (j as f64 + 0.5) * step);
        }
    }
    let theta = Tensor::from_f64(&[n * n, 2], &pts).unwrap();
    let c = Tensor::from_f64(&[1, cond.len()], cond).unwrap().repeat_rows(n * n);
    let lp = flow.log_prob_values(store, &theta, &c).unwrap();
    lp.data().iter().map(|v| v.exp()).sum::<f64>() * step * step
}

/// Posterior of the conjugate model by brute force on a `[-5, 5]²` grid
/// (`n²` midpoints). Returns the normalized density evaluated at `theta`.
pub fn grid_posterior_density(model: &ConjugateGaussian, data: &[f64], theta: &[f64], n: usize) -> f64 {
    let step = 10.0 / n as f64;
    let log_joint = |t: &[f64]| model.prior_log_density(t) + model.log_likelihood(data, t);
    let mut logs = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let t = [-5.0 + (i as f64 + 0.5) * step, -5.0 + (j as f64 + 0.5) * step];
            logs.push(log_joint(&t));
        }
    }
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = logs.iter().map(|l| (l - m).exp()).sum::<f64>() * step * step;
    (log_joint(theta) - m).exp() / z
}

pub fn sample_moments(draws: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (draws.rows(), draws.cols());
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| draws.at(i, j)).sum::<f64>() / n as f64)
        .collect();
    let sd = (0..d)
        .map(|j| ((0..n).map(|i| (draws.at(i, j) - mean[j]).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
        .collect();
    (mean, sd)
}

pub fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}

pub fn train_posterior(seed: u64, cfg: &TrainConfig) -> (PosteriorAmortizer<f32>, TrainHistory) {
    let model = ConjugateGaussian::default();
    let mut am = PosteriorAmortizer::<f32>::new(&model, &NetworkSettings::default(), seed).unwrap();
    let h = train(&mut am, &model as &dyn GenerativeModel, cfg).unwrap();
    (am, h)
}

pub fn train_likelihood<M: GenerativeModel + 'static>(
    model: &M,
    seed: u64,
    cfg: &TrainConfig,
) -> (LikelihoodAmortizer<f32>, TrainHistory) {
    let mut am = LikelihoodAmortizer::<f32>::new(model, &NetworkSettings::default(), seed).unwrap();
    let h = train(&mut am, model as &dyn GenerativeModel, cfg).unwrap();
    (am, h)
}

pub fn train_comparison(seed: u64, cfg: &TrainConfig) -> (ComparisonAmortizer<f32>, TrainHistory) {
    let set = ModelSet::model_pair();
    let mut am = ComparisonAmortizer::<f32>::new(&set, &NetworkSettings::default(), seed).unwrap();
    let h = train(&mut am, &set, cfg).unwrap();
    (am, h)
}

pub fn meanvar() -> GaussianMeanVar {
    GaussianMeanVar::default()
}
