mod common;

use amortflow::autodiff::finite_difference_check;
use amortflow::nn::ConditionalFlow;
use amortflow::{ParamStore, Rng, Scalar, Tape, Tensor};
use common::{grid_mass, random_flow};
use proptest::prelude::{prop_assert, proptest, ProptestConfig};

fn forward_values<T: Scalar>(
    store: &ParamStore<T>,
    flow: &ConditionalFlow,
    theta: &Tensor<T>,
    cond: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let mut tape = Tape::inference();
    let p = store.bind(&mut tape);
    let t = tape.leaf(theta.clone());
    let c = tape.leaf(cond.clone());
    let (z, ld) = flow.forward(&mut tape, &p, t, c).unwrap();
    (tape.value(z).clone(), tape.value(ld).clone())
}

fn roundtrip_error<T: Scalar>(trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let d = rng.int_inclusive(2, 5);
        let k = rng.int_inclusive(0, 3);
        let (store, flow) = random_flow::<T>(d, k, 4, 0.3, &mut rng);
        let theta = Tensor::from_f64(&[1, d], &rng.normals(d)).unwrap();
        let cond = Tensor::from_f64(&[1, k], &rng.normals(k)).unwrap();
        let (z, _) = forward_values(&store, &flow, &theta, &cond);
        let back = flow.inverse_values(&store, &z, &cond).unwrap();
        for (a, b) in back.data().iter().zip(theta.data()) {
            worst = worst.max((a.to_f64_lossless() - b.to_f64_lossless()).abs());
        }
    }
    worst
}

#[test]
fn inverse_roundtrip_over_a_thousand_random_triples() {
    let err = roundtrip_error::<f64>(1000, 1);
    assert!(err < 1e-5, "f64 roundtrip error {err}");
    let err = roundtrip_error::<f32>(1000, 2);
    assert!(err < 1e-5, "f32 roundtrip error {err}");
}

/// `log|det ∂z/∂θ|` by LU with partial pivoting.
fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let piv = a[c][c];
        acc += piv.abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / piv;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

#[test]
fn log_det_matches_finite_difference_jacobian() {
    let mut rng = Rng::seed(3);
    for _ in 0..50 {
        let d = rng.int_inclusive(2, 5);
        let (store, flow) = random_flow::<f64>(d, 2, 4, 0.3, &mut rng);
        let theta = rng.normals(d);
        let cond = Tensor::from_f64(&[1, 2], &rng.normals(2)).unwrap();
        let at = |t: &[f64]| forward_values(&store, &flow, &Tensor::from_f64(&[1, d], t).unwrap(), &cond);
        let (_, ld) = at(&theta);
        let h = 1e-6;
        let mut jac = vec![vec![0.0; d]; d];
        for j in 0..d {
            let (mut up, mut dn) = (theta.clone(), theta.clone());
            up[j] += h;
            dn[j] -= h;
            let (zu, _) = at(&up);
            let (zd, _) = at(&dn);
            for i in 0..d {
                jac[i][j] = (zu.data()[i] - zd.data()[i]) / (2.0 * h);
            }
        }
        let fd = log_abs_det(jac);
        assert!((fd - ld.data()[0]).abs() < 1e-6, "fd {fd} vs {}", ld.data()[0]);
    }
}

#[test]
fn density_integrates_to_one_on_a_grid() {
    let mut rng = Rng::seed(4);
    for _ in 0..5 {
        let (store, flow) = random_flow::<f64>(2, 1, 3, 0.2, &mut rng);
        let mass = grid_mass(&store, &flow, &[rng.normal()], 6.0, 400);
        assert!((mass - 1.0).abs() < 1e-2, "mass {mass}");
    }
}

#[test]
fn log_prob_gradients_match_finite_differences() {
    let mut rng = Rng::seed(5);
    let (store, flow) = random_flow::<f64>(3, 2, 3, 0.3, &mut rng);
    let theta = Tensor::from_f64(&[4, 3], &rng.normals(12)).unwrap();
    let cond = Tensor::from_f64(&[4, 2], &rng.normals(8)).unwrap();
    let loss = |tape: &mut Tape<f64>, p: &[amortflow::Var], t, c| {
        let lp = flow.log_prob(tape, p, t, c)?;
        Ok(tape.sum_all(lp))
    };
    let err = finite_difference_check(
        |tape, t| {
            let p = store.bind(tape);
            let c = tape.leaf(cond.clone());
            loss(tape, &p, t, c)
        },
        &theta,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "theta: {err}");
    let err = finite_difference_check(
        |tape, c| {
            let p = store.bind(tape);
            let t = tape.leaf(theta.clone());
            loss(tape, &p, t, c)
        },
        &cond,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "condition: {err}");
    for k in 0..store.len() {
        let err = finite_difference_check(
            |tape, pk| {
                let mut p = store.bind(tape);
                p[k] = pk;
                let t = tape.leaf(theta.clone());
                let c = tape.leaf(cond.clone());
                loss(tape, &p, t, c)
            },
            &store.tensors()[k].clone(),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{}: {err}", store.names()[k]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampling_inverts_log_prob_consistently(seed in 0u64..10_000, d in 2usize..5) {
        let mut rng = Rng::seed(seed);
        let (store, flow) = random_flow::<f64>(d, 1, 3, 0.3, &mut rng);
        let cond = Tensor::from_f64(&[1, 1], &[rng.normal()]).unwrap();
        let draws = flow.sample(&store, &cond, 8, &mut rng).unwrap();
        let lp = flow.log_prob_values(&store, &draws, &cond.repeat_rows(8)).unwrap();
        prop_assert!(draws.all_finite() && lp.all_finite());
        let (z, _) = forward_values(&store, &flow, &draws, &cond.repeat_rows(8));
        let back = flow.inverse_values(&store, &z, &cond.repeat_rows(8)).unwrap();
        for (a, b) in back.data().iter().zip(draws.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
