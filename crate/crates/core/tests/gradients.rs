//! Analytic gradients against central finite differences (h = 1e-5, f64) of
//! independent, naive re-implementations of each objective.

use saff_core::ffnet::FFLayer;
use saff_core::numerics::{Rng, Tensor};

mod oracles;

use oracles::gradients::{conv_check, dense_check, dense_case, head_check, peer_check, random, triplet_check, GradCheck};

const CASES: u64 = 60;

fn assert_all(first_seed: u64, check: impl Fn(u64) -> GradCheck) -> Vec<GradCheck> {
    (first_seed..first_seed + CASES)
        .map(|seed| {
            let c = check(seed);
            assert!(c.passes(), "seed {seed}: {c:?}");
            c
        })
        .collect()
}

#[test]
fn dense_weight_bias_and_theta_gradients_match_finite_differences() {
    assert_all(0, dense_check);
}

#[test]
fn conv_weight_bias_and_theta_gradients_match_finite_differences() {
    assert_all(1000, conv_check);
}

#[test]
fn peer_norm_gradients_match_finite_differences() {
    assert_all(2000, peer_check);
}

#[test]
fn triplet_gradients_match_finite_differences() {
    let active = assert_all(3000, triplet_check).iter().filter(|c| c.active).count();
    assert!(active >= 50, "only {active} cases with an active hinge");
}

#[test]
fn head_gradients_match_finite_differences() {
    assert_all(4000, head_check);
}

#[test]
fn fixed_threshold_gets_no_gradient() {
    let mut case = dense_case(7);
    case.layer.theta_trainable = false;
    let (grad, _) = case.layer.local_gradient(&case.xp, &case.xn, None).unwrap();
    assert_eq!(grad.theta, 0.0);
}

#[test]
fn dead_relu_region_has_zero_weight_and_bias_gradient() {
    let mut rng = Rng::new(9);
    let mut layer = FFLayer::dense(4, 3, &mut rng);
    layer.bias = Tensor::filled(&[3], -100.0);
    let xp = random(&[3, 4], 1.0, &mut rng);
    let xn = random(&[3, 4], 1.0, &mut rng);
    let (g, _) = layer.local_gradient(&xp, &xn, None).unwrap();
    assert!(g.weights.data().iter().all(|&v| v == 0.0));
    assert!(g.bias.data().iter().all(|&v| v == 0.0));
}

#[test]
fn identical_inputs_give_the_closed_form_theta_gradient() {
    let mut rng = Rng::new(10);
    let layer = FFLayer::dense(5, 4, &mut rng).with_theta(1.5, true);
    let x = random(&[4, 5], 1.0, &mut rng);
    let (g, _) = layer.local_gradient(&x, &x, None).unwrap();
    let out = layer.forward(&x).unwrap();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    // dL/dθ = (1/2B) Σ [σ(θ − S) − σ(S − θ)]
    let expected: f64 = out
        .pre_norm
        .samples()
        .map(|y| {
            let s: f64 = y.iter().map(|v| v * v).sum();
            sig(layer.theta - s) - sig(s - layer.theta)
        })
        .sum::<f64>()
        / 8.0;
    assert!((g.theta - expected).abs() < 1e-12);
}
