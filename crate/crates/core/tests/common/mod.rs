#![allow(dead_code)]

use ndarray::Array2;
use trajlab::dataset::{gen_mixture, Dataset, MixtureSpec};
use trajlab::nn::{NetSpec, ParamSet};
use trajlab::rng::{derive_stream, SeedPlan, StreamTag};

/// Standard-normal matrix from a test-only stream.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut s = derive_stream(seed, StreamTag::ProbeSample, 99);
    Array2::from_shape_fn((rows, cols), |_| s.next_gaussian())
}

/// Initialized network with every parameter (including biases, gains and
/// shifts) jittered so that no gradient is structurally zero.
pub fn jittered_net(spec: &NetSpec, seed: u64, scale: f64) -> ParamSet<f64> {
    let mut p = ParamSet::init(spec, &SeedPlan::new(seed)).unwrap();
    let mut s = derive_stream(seed, StreamTag::ProbeSample, 98);
    for v in p.values_mut() {
        *v += scale * s.next_gaussian();
    }
    p
}

pub fn small_mixture(k: usize, d: usize, n_train: usize, n_test: usize, seed: u64) -> (Dataset<f64>, Dataset<f64>) {
    gen_mixture(&MixtureSpec {
        n_classes: k,
        dim: d,
        n_train,
        n_test,
        seed,
        ..MixtureSpec::default()
    })
    .unwrap()
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Brute-force optimum of a square assignment problem.
pub fn brute_force_assignment(cost: &Array2<f64>, maximize: bool) -> f64 {
    let n = cost.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = if maximize { f64::NEG_INFINITY } else { f64::INFINITY };
    heap_permutations(&mut perm, n, &mut |p| {
        let v: f64 = p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        if (maximize && v > best) || (!maximize && v < best) {
            best = v;
        }
    });
    best
}

fn heap_permutations(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k <= 1 {
        f(p);
        return;
    }
    heap_permutations(p, k - 1, f);
    for i in 0..k - 1 {
        if k.is_multiple_of(2) {
            p.swap(i, k - 1);
        } else {
            p.swap(0, k - 1);
        }
        heap_permutations(p, k - 1, f);
    }
}

/// Finite-difference check of `loss_and_grad`. Returns the worst relative
/// error `|g - fd| / max(|g|, |fd|, floor)` over all parameters.
pub fn gradient_check(params: &ParamSet<f64>, x: &Array2<f64>, y: &[usize], h: f64, floor: f64) -> (f64, usize) {
    let (_, g) = trajlab::nn::loss_and_grad(params, x.view(), y).unwrap();
    let g = g.to_flat();
    let flat = params.to_flat();
    let loss_at = |v: &[f64]| {
        let p = ParamSet::from_flat(&params.spec, v).unwrap();
        trajlab::nn::loss_and_grad(&p, x.view(), y).unwrap().0
    };
    let mut worst = (0.0, 0);
    let mut v = flat.clone();
    for i in 0..flat.len() {
        v[i] = flat[i] + h;
        let up = loss_at(&v);
        v[i] = flat[i] - h;
        let down = loss_at(&v);
        v[i] = flat[i];
        let fd = (up - down) / (2.0 * h);
        let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(floor);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    worst
}
