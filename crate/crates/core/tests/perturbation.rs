mod common;

use trajlab::dataset::{gen_mixture, MixtureSpec};
use trajlab::nn::{grad, NetSpec, ParamSet};
use trajlab::perturb::{
    apply, batch_direction, build_mask, expected_init_norm, normalize, perturbation, sgd_noise_scale, MaskSpec,
    PerturbKind, PerturbSpec,
};
use trajlab::rng::SeedPlan;
use trajlab::train::TrainConfig;

#[test]
fn batch_direction_is_the_mean_of_per_example_gradients() {
    let (train, _) = common::small_mixture(4, 6, 200, 20, 3);
    let spec = NetSpec::mlp(6, &[16, 16], 4);
    let p = common::jittered_net(&spec, 1, 0.1);
    let all = build_mask(&MaskSpec::AllWeights, &spec, &SeedPlan::new(0)).unwrap();
    let idx = [3usize, 17, 18, 90, 150, 199];
    let dir = batch_direction(&p, &train, &all, &idx).unwrap();
    let mut mean = vec![0.0; spec.n_params()];
    for &i in &idx {
        let (x, y) = train.gather(&[i]);
        let g = grad(&p, x.view(), &y).unwrap().to_flat();
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v / idx.len() as f64;
        }
    }
    let worst = dir
        .iter()
        .zip(&mean)
        .zip(&all.selected)
        .map(|((d, m), &sel)| if sel { (d - m).abs() } else { d.abs() })
        .fold(0.0, f64::max);
    assert!(worst < 1e-12, "max abs diff {worst:e}");
}

#[test]
fn normalized_direction_hand_fixture() {
    // One 2x2 affine layer: every weight has init variance 2/2 = 1.
    let spec = NetSpec::mlp(2, &[], 2);
    let seeds = SeedPlan::new(0);
    let all = build_mask(&MaskSpec::AllWeights, &spec, &seeds).unwrap();
    assert_eq!(expected_init_norm(&spec, &all).unwrap(), 2.0);
    let single = build_mask(&MaskSpec::SingleWeight { seed: 1 }, &spec, &seeds).unwrap();
    assert_eq!(expected_init_norm(&spec, &single).unwrap(), 1.0);
    let mut raw = vec![0.0; spec.n_params()];
    raw[0] = 3.0;
    let eps = normalize(&raw, &all, &spec).unwrap();
    assert_eq!(eps[..4], [2.0, 0.0, 0.0, 0.0]);
    let theta = ParamSet::<f64>::zeros(&spec);
    let moved = apply(&theta, &eps, 0.01).unwrap();
    assert_eq!(moved.to_flat()[..4], [0.02, 0.0, 0.0, 0.0]);
    assert!(normalize(&vec![0.0; spec.n_params()], &all, &spec).is_err());
}

#[test]
fn perturbed_distance_is_sigma_times_init_norm() {
    let (train, _) = common::small_mixture(3, 5, 300, 30, 2);
    let spec = NetSpec::mlp(5, &[12, 12], 3);
    let p = common::jittered_net(&spec, 8, 0.1);
    for kind in [PerturbKind::Batch, PerturbKind::Gaussian] {
        for mask in [
            MaskSpec::AllWeights,
            MaskSpec::NormOnly,
            MaskSpec::Fraction { fraction: 0.1, seed: 3 },
            MaskSpec::SingleWeight { seed: 4 },
        ] {
            for sigma in [1e-4, 1e-2, 1.0] {
                let ps = PerturbSpec {
                    kind,
                    sigma,
                    mask,
                    step: 0,
                    batch_size: 32,
                };
                let (eps, m) = perturbation(&p, &train, &ps, &SeedPlan::new(5)).unwrap();
                let target = expected_init_norm(&spec, &m).unwrap();
                let q = apply(&p, &eps, sigma).unwrap();
                let d = trajlab::divergence::l2(&p, &q).unwrap();
                let rel = (d - sigma * target).abs() / (sigma * target);
                assert!(rel < 1e-9, "{kind:?} {mask:?} sigma {sigma}: relative error {rel:e}");
            }
        }
    }
}

#[test]
fn sgd_noise_scale_limits_and_repeatability() {
    let (train, _) = gen_mixture::<f64>(&MixtureSpec::default()).unwrap();
    let spec = NetSpec::mlp(32, &[128, 128, 128], 10);
    let p = ParamSet::init(&spec, &SeedPlan::new(0)).unwrap();
    let cfg = TrainConfig::default();
    // Step 0 of the warm-up has learning rate 0.
    assert_eq!(sgd_noise_scale(&p, &train, &cfg, &SeedPlan::new(0), 0, 4).unwrap(), 0.0);
    let (small, _) = common::small_mixture(3, 32, 64, 8, 1);
    let full = TrainConfig {
        batch_size: 64,
        ..cfg.clone()
    };
    let spec3 = NetSpec::mlp(32, &[16], 3);
    let p3 = ParamSet::init(&spec3, &SeedPlan::new(0)).unwrap();
    assert_eq!(
        sgd_noise_scale(&p3, &small, &full, &SeedPlan::new(0), 200, 3).unwrap(),
        0.0
    );
    let a = sgd_noise_scale(&p, &train, &cfg, &SeedPlan::new(1), 100, 64).unwrap();
    let b = sgd_noise_scale(&p, &train, &cfg, &SeedPlan::new(2), 100, 64).unwrap();
    assert!(a > 0.0);
    assert!((a - b).abs() / a.max(b) < 0.1, "{a} vs {b}");
}
