//! Linear-kernel representational similarity: debiased HSIC and angular CKA.

use ndarray::{Array2, Axis};
use rand::seq::index;

use crate::dataset::Dataset;
use crate::error::{LabError, Result};
use crate::nn::{forward, ParamSet};
use crate::rng::{SeedPlan, StreamTag};
use crate::scalar::Scalar;

/// Default probe size.
pub const DEFAULT_PROBE: usize = 1000;

fn check_pair<T: Scalar>(x: &Array2<T>, y: &Array2<T>) -> Result<usize> {
    let m = x.nrows();
    if m != y.nrows() {
        return Err(LabError::Shape(format!("{m} vs {} probe examples", y.nrows())));
    }
    if m < 4 {
        return Err(LabError::Config(format!(
            "debiased HSIC needs m >= 4 examples, got {m}"
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite("representation matrix".into()));
    }
    Ok(m)
}

/// Doubly centered linear Gram matrix `H X X^T H`.
fn centered_gram<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut k = x.dot(&x.t());
    let m = T::of_usize(k.nrows());
    let row_mean = k.mean_axis(Axis(1)).expect("non-empty");
    let col_mean = k.mean_axis(Axis(0)).expect("non-empty");
    let grand = row_mean.sum() / m;
    for ((i, j), v) in k.indexed_iter_mut() {
        *v = *v - row_mean[i] - col_mean[j] + grand;
    }
    k
}

/// Entries strictly below the diagonal, row by row.
fn strict_lower<T: Scalar>(k: &Array2<T>) -> Vec<T> {
    let m = k.nrows();
    let mut out = Vec::with_capacity(m * (m - 1) / 2);
    for i in 1..m {
        out.extend(k.row(i).iter().take(i).copied());
    }
    out
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn scale<T: Scalar>(m: usize) -> T {
    T::of(2.0 / (m as f64 * (m as f64 - 3.0)))
}

/// Reduced-bias HSIC estimate:
/// `2 / (m (m - 3)) * <tril(H X X^T H), tril(H Y Y^T H)>_F`, with the
/// diagonal excluded.
pub fn hsic_debiased<T: Scalar>(x: &Array2<T>, y: &Array2<T>) -> Result<T> {
    let m = check_pair(x, y)?;
    let kx = strict_lower(&centered_gram(x));
    let ky = strict_lower(&centered_gram(y));
    Ok(scale::<T>(m) * dot(&kx, &ky))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CkaReport<T> {
    /// Angle in radians, in `[0, pi]`.
    pub angle: T,
    pub hsic_xy: T,
    pub hsic_xx: T,
    pub hsic_yy: T,
}

/// Angular CKA, `arccos(HSIC(X,Y) / sqrt(HSIC(X,X) HSIC(Y,Y)))`.
///
/// The angle is evaluated as `2 asin(|u - v| / 2)` for the unit-normalized
/// lower-triangular Gram vectors `u`, `v`. That is the same angle as the
/// arccos form but does not lose half the digits near zero.
pub fn angular_cka_report<T: Scalar>(x: &Array2<T>, y: &Array2<T>) -> Result<CkaReport<T>> {
    let m = check_pair(x, y)?;
    let kx = strict_lower(&centered_gram(x));
    let ky = strict_lower(&centered_gram(y));
    let s = scale::<T>(m);
    let (xx, yy, xy) = (dot(&kx, &kx), dot(&ky, &ky), dot(&kx, &ky));
    if xx.is_nan() || yy.is_nan() || xx <= T::zero() || yy <= T::zero() {
        return Err(LabError::Degenerate("representation has zero self-HSIC".into()));
    }
    let (nx, ny) = (xx.sqrt(), yy.sqrt());
    let chord2: T = kx
        .iter()
        .zip(&ky)
        .map(|(&a, &b)| {
            let d = a / nx - b / ny;
            d * d
        })
        .sum();
    let half = (chord2.sqrt() / T::of(2.0)).min(T::one());
    Ok(CkaReport {
        angle: T::of(2.0) * half.asin(),
        hsic_xy: s * xy,
        hsic_xx: s * xx,
        hsic_yy: s * yy,
    })
}

pub fn angular_cka<T: Scalar>(x: &Array2<T>, y: &Array2<T>) -> Result<T> {
    Ok(angular_cka_report(x, y)?.angle)
}

/// Seeded probe indices into `n` examples, sorted.
pub fn probe_indices(n: usize, m: usize, seeds: &SeedPlan) -> Result<Vec<usize>> {
    if m < 4 {
        return Err(LabError::Config(format!("probe needs at least 4 examples, got {m}")));
    }
    if m > n {
        return Err(LabError::Config(format!("probe of {m} from {n} examples")));
    }
    let mut idx = index::sample(&mut seeds.stream(StreamTag::ProbeSample, 0), n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Last-hidden-layer outputs of both networks on the same seeded probe.
pub fn probe_representations<T: Scalar>(
    a: &ParamSet<T>,
    b: &ParamSet<T>,
    data: &Dataset<T>,
    m: usize,
    seeds: &SeedPlan,
) -> Result<(Array2<T>, Array2<T>)> {
    let idx = probe_indices(data.len(), m, seeds)?;
    let (x, _) = data.gather(&idx);
    let (_, ta) = forward(a, x.view())?;
    let (_, tb) = forward(b, x.view())?;
    Ok((ta.penultimate().clone(), tb.penultimate().clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_representation_has_zero_hsic() {
        let x = Array2::from_elem((6, 3), 2.5);
        let y = array![[1.0], [2.0], [0.0], [5.0], [3.0], [1.0]];
        assert_eq!(hsic_debiased(&x, &y).unwrap(), 0.0);
        assert!(matches!(angular_cka(&x, &y), Err(LabError::Degenerate(_))));
    }

    #[test]
    fn too_few_examples() {
        let x = Array2::<f64>::zeros((3, 2));
        assert!(hsic_debiased(&x, &x).is_err());
    }

    #[test]
    fn self_angle_is_zero() {
        let x = array![[1.0, 0.5], [0.2, -1.0], [3.0, 0.0], [-1.0, 2.0], [0.5, 0.5]];
        assert_eq!(angular_cka(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn symmetric() {
        let x = array![[1.0, 0.5], [0.2, -1.0], [3.0, 0.0], [-1.0, 2.0], [0.5, 0.5]];
        let y = array![[0.0], [1.0], [4.0], [-2.0], [1.5]];
        assert_eq!(hsic_debiased(&x, &y).unwrap(), hsic_debiased(&y, &x).unwrap());
        let d: f64 = angular_cka(&x, &y).unwrap() - angular_cka(&y, &x).unwrap();
        assert!(d.abs() < 1e-15);
    }

    #[test]
    fn probe_size_checks() {
        let seeds = SeedPlan::new(0);
        assert!(probe_indices(10, 3, &seeds).is_err());
        assert!(probe_indices(10, 11, &seeds).is_err());
        assert_eq!(probe_indices(10, 10, &seeds).unwrap(), (0..10).collect::<Vec<_>>());
    }
}
