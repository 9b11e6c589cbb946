//! Perturbation directions, masks and the init-scale normalization.
//!
//! A perturbation is built in three steps: choose which parameters may move
//! (the mask), draw a raw direction (a fresh-batch gradient or an
//! initialization-shaped Gaussian), and rescale the masked direction so its
//! norm equals the expected norm of the masked parameters at initialization.
//! The perturbed network is then `theta + sigma * eps`.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{LabError, Result};
use crate::nn::{grad, NetSpec, ParamSet, TensorKind};
use crate::rng::{SeedPlan, StreamTag};
use crate::scalar::Scalar;
use crate::train::{lr_at, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    Batch,
    Gaussian,
}

impl PerturbKind {
    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Batch => "batch",
            PerturbKind::Gaussian => "gaussian",
        }
    }
}

impl std::str::FromStr for PerturbKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(PerturbKind::Batch),
            "gaussian" | "gauss" => Ok(PerturbKind::Gaussian),
            _ => Err(LabError::Config(format!("unknown perturbation kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mask", rename_all = "lowercase")]
pub enum MaskSpec {
    /// Every weight-matrix entry; biases and norm parameters are excluded.
    AllWeights,
    /// Biases, gains and shifts only.
    NormOnly,
    /// A seeded uniform subset of the weight entries.
    Fraction { fraction: f64, seed: u64 },
    /// Exactly one seeded weight entry.
    SingleWeight { seed: u64 },
}

impl MaskSpec {
    /// Short label used in result rows.
    pub fn label(&self) -> String {
        match self {
            MaskSpec::AllWeights => "all".into(),
            MaskSpec::NormOnly => "norm".into(),
            MaskSpec::Fraction { fraction, .. } => format!("fraction:{fraction}"),
            MaskSpec::SingleWeight { .. } => "single".into(),
        }
    }

    /// Parses `all`, `norm`, `single` or `fraction:<f>`; `seed` feeds the
    /// seeded variants.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        match s {
            "all" => Ok(MaskSpec::AllWeights),
            "norm" => Ok(MaskSpec::NormOnly),
            "single" => Ok(MaskSpec::SingleWeight { seed }),
            _ => {
                let f = s
                    .strip_prefix("fraction:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| LabError::Config(format!("unknown mask {s:?}")))?;
                if !(0.0..=1.0).contains(&f) {
                    return Err(LabError::Config(format!("mask fraction {f} not in [0, 1]")));
                }
                Ok(MaskSpec::Fraction { fraction: f, seed })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    /// Magnitude relative to the expected initialization norm of the masked
    /// parameters.
    pub sigma: f64,
    pub mask: MaskSpec,
    /// Step at which the perturbation is applied.
    pub step: usize,
    /// Examples in the independent batch of a batch perturbation.
    pub batch_size: usize,
}

/// 0/1 selection over the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightMask {
    pub selected: Vec<bool>,
    pub count: usize,
}

impl WeightMask {
    fn from_selected(selected: Vec<bool>) -> Self {
        let count = selected.iter().filter(|&&s| s).count();
        WeightMask { selected, count }
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i)
    }
}

/// Flat indices of all weight-matrix entries, in flat order.
fn weight_indices(spec: &NetSpec) -> Vec<usize> {
    spec.layout()
        .iter()
        .filter(|s| s.kind == TensorKind::Weight)
        .flat_map(|s| s.range())
        .collect()
}

pub fn build_mask(mask: &MaskSpec, spec: &NetSpec, seeds: &SeedPlan) -> Result<WeightMask> {
    spec.validate()?;
    let n = spec.n_params();
    let mut selected = vec![false; n];
    match *mask {
        MaskSpec::AllWeights => {
            for i in weight_indices(spec) {
                selected[i] = true;
            }
        }
        MaskSpec::NormOnly => {
            for seg in spec.layout().iter().filter(|s| s.kind != TensorKind::Weight) {
                selected[seg.range()].fill(true);
            }
        }
        MaskSpec::Fraction { fraction, seed } => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(LabError::Config(format!("mask fraction {fraction} not in [0, 1]")));
            }
            let pool = weight_indices(spec);
            let mut k = (fraction * pool.len() as f64).round() as usize;
            if k == 0 {
                log::warn!(
                    "mask fraction {fraction} of {} weights rounds to 0; using 1",
                    pool.len()
                );
                k = 1;
            }
            let mut s = seeds.stream(StreamTag::PerturbMask, seed);
            for j in index::sample(&mut s, pool.len(), k) {
                selected[pool[j]] = true;
            }
        }
        MaskSpec::SingleWeight { seed } => {
            let pool = weight_indices(spec);
            let mut s = seeds.stream(StreamTag::PerturbMask, seed);
            let j = index::sample(&mut s, pool.len(), 1).index(0);
            selected[pool[j]] = true;
        }
    }
    Ok(WeightMask::from_selected(selected))
}

/// Initialization-scale variance assigned to every flat parameter.
///
/// Weights use the He variance `2 / fan_in` of their layer. Biases, gains and
/// shifts use the variance of the weights in the layer they feed, i.e.
/// `2 / width`; the output bias has no following layer and uses its own
/// layer's weight variance.
pub fn perturbation_variances(spec: &NetSpec) -> Vec<f64> {
    let widths = spec.widths();
    let n_layers = spec.n_layers();
    let mut out = vec![0.0; spec.n_params()];
    for seg in spec.layout() {
        let var = match seg.kind {
            TensorKind::Weight => 2.0 / seg.fan_in as f64,
            _ if seg.layer + 1 < n_layers => 2.0 / widths[seg.layer + 1] as f64,
            _ => 2.0 / seg.fan_in as f64,
        };
        out[seg.range()].fill(var);
    }
    out
}

/// `sqrt(sum of init variances over the mask)`.
pub fn expected_init_norm(spec: &NetSpec, mask: &WeightMask) -> Result<f64> {
    if mask.count == 0 {
        return Err(LabError::Degenerate("empty perturbation mask".into()));
    }
    if mask.selected.len() != spec.n_params() {
        return Err(LabError::Shape("mask length does not match network".into()));
    }
    let var = perturbation_variances(spec);
    Ok(mask.indices().map(|i| var[i]).sum::<f64>().sqrt())
}

/// Raw Gaussian direction: masked entries drawn with their init variance,
/// everything else exactly zero.
pub fn sample_gaussian<T: Scalar>(spec: &NetSpec, mask: &WeightMask, seeds: &SeedPlan, index: u64) -> Vec<T> {
    let var = perturbation_variances(spec);
    let mut s = seeds.stream(StreamTag::PerturbGaussian, index);
    mask.selected
        .iter()
        .zip(var)
        .map(|(&sel, v)| {
            if sel {
                T::of(v.sqrt() * s.next_gaussian())
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Draws `b` distinct training indices from `stream`, returned sorted so the
/// gradient reduction order is canonical.
fn sample_batch_indices(n: usize, b: usize, stream: &mut crate::rng::Stream) -> Vec<usize> {
    let mut idx = index::sample(stream, n, b).into_vec();
    idx.sort_unstable();
    idx
}

/// Raw batch direction: the mean gradient over `b` independently drawn
/// training examples, zeroed outside the mask.
pub fn sample_batch<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    mask: &WeightMask,
    seeds: &SeedPlan,
    index: u64,
    b: usize,
) -> Result<Vec<T>> {
    if b == 0 || b > data.len() {
        return Err(LabError::Config(format!(
            "perturbation batch {b} not in [1, {}]",
            data.len()
        )));
    }
    let idx = sample_batch_indices(data.len(), b, &mut seeds.stream(StreamTag::PerturbBatch, index));
    batch_direction(params, data, mask, &idx)
}

/// Mean gradient over the given examples, zeroed outside the mask.
pub fn batch_direction<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    mask: &WeightMask,
    indices: &[usize],
) -> Result<Vec<T>> {
    let (x, y) = data.gather(indices);
    let g = grad(params, x.view(), &y)?;
    Ok(g.values()
        .zip(&mask.selected)
        .map(|(&v, &sel)| if sel { v } else { T::zero() })
        .collect())
}

/// Rescales the masked direction to norm `expected_init_norm`.
pub fn normalize<T: Scalar>(raw: &[T], mask: &WeightMask, spec: &NetSpec) -> Result<Vec<T>> {
    let target = expected_init_norm(spec, mask)?;
    if raw.len() != mask.selected.len() {
        return Err(LabError::Shape("direction length does not match mask".into()));
    }
    let masked: Vec<f64> = raw
        .iter()
        .zip(&mask.selected)
        .map(|(&v, &sel)| if sel { v.as_f64() } else { 0.0 })
        .collect();
    let norm = masked.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm.is_nan() || norm <= 0.0 || !norm.is_finite() {
        return Err(LabError::Degenerate(format!("perturbation direction has norm {norm}")));
    }
    let scale = target / norm;
    Ok(masked.into_iter().map(|v| T::of(v * scale)).collect())
}

/// `theta + sigma * eps`; `theta` is left untouched.
pub fn apply<T: Scalar>(params: &ParamSet<T>, eps: &[T], sigma: f64) -> Result<ParamSet<T>> {
    if eps.len() != params.n_params() {
        return Err(LabError::Shape(format!(
            "perturbation of length {} for {} parameters",
            eps.len(),
            params.n_params()
        )));
    }
    let mut out = params.clone();
    let s = T::of(sigma);
    for (p, &e) in out.values_mut().zip(eps) {
        *p += s * e;
    }
    Ok(out)
}

/// Normalized perturbation direction `eps` for `spec` at the current
/// parameters. `seeds` is the trajectory's seed plan; perturbation streams are
/// indexed by the perturbation step.
pub fn perturbation<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    spec: &PerturbSpec,
    seeds: &SeedPlan,
) -> Result<(Vec<T>, WeightMask)> {
    let mask = build_mask(&spec.mask, &params.spec, seeds)?;
    let raw = match spec.kind {
        PerturbKind::Gaussian => sample_gaussian(&params.spec, &mask, seeds, spec.step as u64),
        PerturbKind::Batch => sample_batch(params, data, &mask, seeds, spec.step as u64, spec.batch_size)?,
    };
    let eps = normalize(&raw, &mask, &params.spec)?;
    Ok((eps, mask))
}

/// Monte Carlo estimate of `E || lr_t (g_B - g_B') ||_2` over independent
/// pairs of training batches of the configured size.
pub fn sgd_noise_scale<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    config: &TrainConfig,
    seeds: &SeedPlan,
    step: usize,
    n_pairs: usize,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(LabError::Config("n_pairs must be >= 1".into()));
    }
    let b = config.batch_size;
    if b > data.len() {
        return Err(LabError::Config("batch size exceeds the training set".into()));
    }
    let lr = lr_at(config, step);
    let all = WeightMask::from_selected(vec![true; params.n_params()]);
    let mut stream = seeds.stream(StreamTag::SgdNoise, step as u64);
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let ia = sample_batch_indices(data.len(), b, &mut stream);
        let ib = sample_batch_indices(data.len(), b, &mut stream);
        let ga = batch_direction(params, data, &all, &ia)?;
        let gb = batch_direction(params, data, &all, &ib)?;
        let d2: f64 = ga.iter().zip(&gb).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
        total += lr * d2.sqrt();
    }
    Ok(total / n_pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> NetSpec {
        // A single 2x2 affine layer: fan-in 2, He variance 1.
        NetSpec::mlp(2, &[], 2)
    }

    #[test]
    fn all_weights_count() {
        let spec = NetSpec::mlp(32, &[128, 128, 128], 10);
        let m = build_mask(&MaskSpec::AllWeights, &spec, &SeedPlan::new(0)).unwrap();
        assert_eq!(m.count, 32 * 128 + 128 * 128 * 2 + 128 * 10);
    }

    #[test]
    fn single_and_fraction_counts() {
        let spec = NetSpec::mlp(10, &[], 10); // 100 weights
        let seeds = SeedPlan::new(4);
        let m = build_mask(&MaskSpec::SingleWeight { seed: 3 }, &spec, &seeds).unwrap();
        assert_eq!(m.count, 1);
        let f = MaskSpec::Fraction { fraction: 0.5, seed: 1 };
        let a = build_mask(&f, &spec, &seeds).unwrap();
        assert_eq!(a.count, 50);
        assert_eq!(a, build_mask(&f, &spec, &seeds).unwrap());
        assert!(a.indices().all(|i| i < 100));
        let tiny = MaskSpec::Fraction {
            fraction: 1e-9,
            seed: 1,
        };
        assert_eq!(build_mask(&tiny, &spec, &seeds).unwrap().count, 1);
    }

    #[test]
    fn norm_only_mask_excludes_weights() {
        let spec = NetSpec::mlp(3, &[4], 2);
        let m = build_mask(&MaskSpec::NormOnly, &spec, &SeedPlan::new(0)).unwrap();
        assert_eq!(m.count, 4 * 3 + 2);
        for seg in spec.layout() {
            let want = seg.kind != TensorKind::Weight;
            assert!(seg.range().all(|i| m.selected[i] == want));
        }
    }

    #[test]
    fn expected_norm_hand_values() {
        let spec = two_by_two();
        let seeds = SeedPlan::new(0);
        let all = build_mask(&MaskSpec::AllWeights, &spec, &seeds).unwrap();
        assert_eq!(expected_init_norm(&spec, &all).unwrap(), 2.0);
        let one = build_mask(&MaskSpec::SingleWeight { seed: 0 }, &spec, &seeds).unwrap();
        assert_eq!(expected_init_norm(&spec, &one).unwrap(), 1.0);
        let empty = WeightMask::from_selected(vec![false; spec.n_params()]);
        assert!(matches!(
            expected_init_norm(&spec, &empty),
            Err(LabError::Degenerate(_))
        ));
    }

    #[test]
    fn normalize_and_apply_hand_example() {
        let spec = two_by_two();
        let all = build_mask(&MaskSpec::AllWeights, &spec, &SeedPlan::new(0)).unwrap();
        let raw = [3.0, 0.0, 0.0, 0.0, 7.0, -1.0];
        let eps = normalize(&raw, &all, &spec).unwrap();
        assert_eq!(eps, vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let theta = ParamSet::<f64>::from_flat(&spec, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let moved = apply(&theta, &eps, 0.01).unwrap();
        assert_eq!(moved.to_flat(), vec![1.02, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(apply(&theta, &eps, 0.0).unwrap(), theta);
    }

    #[test]
    fn zero_direction_is_degenerate() {
        let spec = two_by_two();
        let all = build_mask(&MaskSpec::AllWeights, &spec, &SeedPlan::new(0)).unwrap();
        let raw = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        assert!(matches!(normalize(&raw, &all, &spec), Err(LabError::Degenerate(_))));
    }

    #[test]
    fn gaussian_respects_mask_and_variance() {
        let spec = NetSpec::mlp(512, &[196], 2);
        let seeds = SeedPlan::new(6);
        let mask = build_mask(&MaskSpec::Fraction { fraction: 0.5, seed: 2 }, &spec, &seeds).unwrap();
        let e: Vec<f64> = sample_gaussian(&spec, &mask, &seeds, 0);
        assert!(e.iter().zip(&mask.selected).all(|(&v, &s)| s || v == 0.0));
        assert_eq!(e, sample_gaussian::<f64>(&spec, &mask, &seeds, 0));

        let all = build_mask(&MaskSpec::AllWeights, &spec, &seeds).unwrap();
        let e: Vec<f64> = sample_gaussian(&spec, &all, &seeds, 1);
        let first = &e[..512 * 196];
        let var = first.iter().map(|v| v * v).sum::<f64>() / first.len() as f64;
        assert!((var - 2.0 / 512.0).abs() / (2.0 / 512.0) < 0.05, "var {var}");
    }
}
