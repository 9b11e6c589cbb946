mod common;

use common::{gaussian_matrix, gradient_check, jittered_net};
use ndarray::{concatenate, Axis};
use trajlab::dataset::MixtureSpec;
use trajlab::nn::{grad, loss_and_grad, NetSpec};
use trajlab::rng::SeedPlan;
use trajlab::train::{train_from_scratch, Decay, TrainConfig};

fn labels(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 7 + 3) % k).collect()
}

#[test]
fn backprop_matches_finite_differences_with_layer_norm() {
    let spec = NetSpec::mlp(5, &[8, 8], 3);
    let p = jittered_net(&spec, 11, 0.3);
    let x = gaussian_matrix(12, 5, 1);
    let (worst, at) = gradient_check(&p, &x, &labels(12, 3), 1e-5, 1e-6);
    assert!(worst < 1e-5, "relative error {worst:e} at flat index {at}");
}

#[test]
fn backprop_matches_finite_differences_without_layer_norm() {
    let mut spec = NetSpec::mlp(4, &[6, 5, 4], 2);
    spec.layer_norm = vec![false, true, false];
    let p = jittered_net(&spec, 3, 0.2);
    let x = gaussian_matrix(9, 4, 2);
    let (worst, at) = gradient_check(&p, &x, &labels(9, 2), 1e-5, 1e-6);
    assert!(worst < 1e-5, "relative error {worst:e} at flat index {at}");
}

#[test]
fn duplicated_batch_gives_identical_gradient() {
    let spec = NetSpec::mlp(3, &[8, 8], 4);
    let p = jittered_net(&spec, 5, 0.1);
    let x = gaussian_matrix(6, 3, 3);
    let y = labels(6, 4);
    let g1 = grad(&p, x.view(), &y).unwrap().to_flat();
    let x2 = concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
    let y2: Vec<usize> = y.iter().chain(&y).copied().collect();
    let g2 = grad(&p, x2.view(), &y2).unwrap().to_flat();
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
    }
}

#[test]
fn separable_fixture_trains_to_a_vanishing_gradient() {
    let mix = MixtureSpec {
        n_classes: 2,
        dim: 2,
        n_train: 256,
        n_test: 64,
        separation: 10.0,
        noise_std: 0.1,
        seed: 2,
    };
    let (train, _) = trajlab::dataset::gen_mixture::<f64>(&mix).unwrap();
    let spec = NetSpec::mlp(2, &[8, 8], 2);
    let cfg = TrainConfig {
        batch_size: 256,
        total_steps: 3000,
        decay: Decay::None,
        ..TrainConfig::default()
    };
    let (p, _) = train_from_scratch(&spec, &train, &cfg, &SeedPlan::new(0)).unwrap();
    let (_, g) = loss_and_grad(&p, train.inputs.view(), &train.labels).unwrap();
    let norm = g.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-3, "gradient norm {norm:e}");
}

#[test]
fn single_precision_gradient_is_close_to_double() {
    let spec = NetSpec::mlp(4, &[8], 3);
    let p = jittered_net(&spec, 9, 0.1);
    let x = gaussian_matrix(5, 4, 4);
    let y = labels(5, 3);
    let g64 = grad(&p, x.view(), &y).unwrap().to_flat();
    let g32 = grad(&p.cast::<f32>(), x.mapv(|v| v as f32).view(), &y)
        .unwrap()
        .to_flat();
    for (a, b) in g64.iter().zip(&g32) {
        assert!((a - *b as f64).abs() < 1e-4, "{a} vs {b}");
    }
}
