//! Distances between two trained networks and fits to divergence series.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{LabError, Result};
use crate::nn::{accuracy_of, cross_entropy, logits, ParamSet};
use crate::scalar::Scalar;

/// Euclidean distance between the flat parameter vectors.
pub fn l2<T: Scalar>(a: &ParamSet<T>, b: &ParamSet<T>) -> Result<T> {
    a.same_shape(b)?;
    let s: T = a.values().zip(b.values()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(s.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BarrierLoss {
    /// Mean cross-entropy (reported on the training split).
    CrossEntropy,
    /// 0-1 error (reported on the test split).
    Error01,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Weight on the first endpoint.
    pub alpha: f64,
    pub loss: f64,
    /// Linear interpolation of the endpoint losses.
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierResult {
    pub barrier: f64,
    pub argmax_alpha: f64,
    pub curve: Vec<CurvePoint>,
}

impl BarrierResult {
    /// `alpha,loss,reference` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,loss,reference\n");
        for p in &self.curve {
            s.push_str(&format!("{},{},{}\n", p.alpha, p.loss, p.reference));
        }
        s
    }
}

/// Grid weights `(i/(n-1), (n-1-i)/(n-1))`. Both are computed from integers
/// so that swapping the endpoints maps the grid onto itself exactly.
fn grid_weights(n_alphas: usize) -> Vec<(f64, f64)> {
    let last = (n_alphas - 1) as f64;
    (0..n_alphas)
        .map(|i| (i as f64 / last, (n_alphas - 1 - i) as f64 / last))
        .collect()
}

/// Maximum excess of the path loss over the interpolated endpoint losses.
///
/// `loss_at(wa, wb)` evaluates the loss at `wa * a + wb * b`. The grid
/// includes both endpoints, whose excess is exactly zero, so the barrier is
/// never negative.
pub fn barrier_on_grid<F>(n_alphas: usize, mut loss_at: F) -> Result<BarrierResult>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    if n_alphas < 2 {
        return Err(LabError::Config("barrier grid needs at least 2 points".into()));
    }
    let grid = grid_weights(n_alphas);
    let losses = grid
        .iter()
        .map(|&(wa, wb)| loss_at(wa, wb))
        .collect::<Result<Vec<_>>>()?;
    let loss_b = losses[0];
    let loss_a = losses[n_alphas - 1];
    let mut curve = Vec::with_capacity(n_alphas);
    let mut best = (f64::NEG_INFINITY, 0.0);
    for (&(wa, wb), &loss) in grid.iter().zip(&losses) {
        // Equal endpoint losses give an exactly flat reference.
        let reference = if loss_a == loss_b {
            loss_a
        } else {
            wa * loss_a + wb * loss_b
        };
        let excess = loss - reference;
        if excess > best.0 {
            best = (excess, wa);
        }
        curve.push(CurvePoint {
            alpha: wa,
            loss,
            reference,
        });
    }
    if !best.0.is_finite() {
        return Err(LabError::NonFinite("loss along the interpolation path".into()));
    }
    Ok(BarrierResult {
        barrier: best.0,
        argmax_alpha: best.1,
        curve,
    })
}

/// Loss barrier on the straight line between two networks.
pub fn barrier<T: Scalar>(
    a: &ParamSet<T>,
    b: &ParamSet<T>,
    loss: BarrierLoss,
    data: &Dataset<T>,
    n_alphas: usize,
) -> Result<BarrierResult> {
    a.same_shape(b)?;
    barrier_on_grid(n_alphas, |wa, wb| {
        let p = ParamSet::interpolate(a, T::of(wa), b, T::of(wb))?;
        let z = logits(&p, data.inputs.view())?;
        Ok(match loss {
            BarrierLoss::CrossEntropy => cross_entropy(&z, &data.labels).as_f64(),
            BarrierLoss::Error01 => 1.0 - accuracy_of(&z, &data.labels),
        })
    })
}

/// Accuracy of the two-model ensemble that averages logits.
pub fn ensemble_eval<T: Scalar>(a: &ParamSet<T>, b: &ParamSet<T>, data: &Dataset<T>) -> Result<f64> {
    a.same_shape(b)?;
    let za = logits(a, data.inputs.view())?;
    let zb = logits(b, data.inputs.view())?;
    Ok(ensemble_accuracy(&za, &zb, &data.labels))
}

pub fn ensemble_accuracy<T: Scalar>(za: &ndarray::Array2<T>, zb: &ndarray::Array2<T>, labels: &[usize]) -> f64 {
    let half = T::of(0.5);
    let mean = (za + zb).mapv(|v| v * half);
    accuracy_of(&mean, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: usize,
    pub l2: f64,
    pub barrier: f64,
}

/// Divergence measured at increasing training steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSeries {
    pub points: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesField {
    L2,
    Barrier,
}

impl DivergenceSeries {
    pub fn push(&mut self, point: SeriesPoint) -> Result<()> {
        if let Some(last) = self.points.last() {
            if point.step <= last.step {
                return Err(LabError::Config(format!(
                    "series steps must increase: {} after {}",
                    point.step, last.step
                )));
            }
        }
        self.points.push(point);
        Ok(())
    }

    pub fn values(&self, field: SeriesField) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .map(|p| {
                let v = match field {
                    SeriesField::L2 => p.l2,
                    SeriesField::Barrier => p.barrier,
                };
                (p.step as f64, v)
            })
            .collect()
    }

    pub fn fit(&self, field: SeriesField) -> Result<ExpFit> {
        fit_exponential(&self.values(field))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,l2,barrier\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{}\n", p.step, p.l2, p.barrier));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    /// Growth rate per step.
    pub rate: f64,
    /// `ln` of the fitted value at step 0.
    pub intercept: f64,
    pub r2: f64,
    pub n_used: usize,
}

/// Least-squares fit of `ln y = intercept + rate * t`. Nonpositive values are
/// skipped; at least three points must remain.
pub fn fit_exponential(points: &[(f64, f64)]) -> Result<ExpFit> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(t, y)| *y > 0.0 && y.is_finite() && t.is_finite())
        .map(|&(t, y)| (t, y.ln()))
        .collect();
    let n = pts.len();
    if n < 3 {
        return Err(LabError::Degenerate(format!(
            "exponential fit needs 3 positive points, have {n}"
        )));
    }
    let nf = n as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sty: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if stt == 0.0 {
        return Err(LabError::Degenerate("all points share one step".into()));
    }
    let rate = sty / stt;
    let intercept = my - rate * mt;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - rate * p.0).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(ExpFit {
        rate,
        intercept,
        r2,
        n_used: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetSpec;

    #[test]
    fn l2_hand_values() {
        let spec = NetSpec::mlp(1, &[], 1);
        let a = ParamSet::<f64>::from_flat(&spec, &[0.0, 0.0]).unwrap();
        let b = ParamSet::<f64>::from_flat(&spec, &[3.0, 4.0]).unwrap();
        assert_eq!(l2(&a, &b).unwrap(), 5.0);
        assert_eq!(l2(&b, &a).unwrap(), 5.0);
        assert_eq!(l2(&a, &a).unwrap(), 0.0);
        let other = ParamSet::<f64>::zeros(&NetSpec::mlp(2, &[], 1));
        assert!(l2(&a, &other).is_err());
    }

    fn scalar_barrier(f: impl Fn(f64) -> f64, a: f64, b: f64) -> BarrierResult {
        barrier_on_grid(11, |wa, wb| Ok(f(wa * a + wb * b))).unwrap()
    }

    #[test]
    fn double_well_barrier() {
        let r = scalar_barrier(|x| (x * x - 1.0).powi(2), -1.0, 1.0);
        assert_eq!(r.barrier, 1.0);
        assert_eq!(r.argmax_alpha, 0.5);
        assert_eq!(r.curve.len(), 11);
    }

    #[test]
    fn convex_valley_has_no_barrier() {
        let r = scalar_barrier(|x| x * x, -1.0, 1.0);
        assert_eq!(r.barrier, 0.0);
    }

    #[test]
    fn grid_needs_two_points() {
        assert!(barrier_on_grid(1, |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn ensemble_hand_logits() {
        let za = ndarray::array![[2.0, 0.0]];
        let zb = ndarray::array![[0.0, 1.0]];
        assert_eq!(ensemble_accuracy(&za, &zb, &[0]), 1.0);
        assert_eq!(ensemble_accuracy(&za, &zb, &[1]), 0.0);
    }

    #[test]
    fn exponential_fit_recovers_rate() {
        let pts: Vec<_> = (0..=50).map(|t| (t as f64, (0.1 * t as f64).exp())).collect();
        let fit = fit_exponential(&pts).unwrap();
        assert!((fit.rate - 0.1).abs() < 1e-6);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_and_linear_series() {
        let flat: Vec<_> = (0..10).map(|t| (t as f64, 3.0)).collect();
        assert_eq!(fit_exponential(&flat).unwrap().rate, 0.0);
        let lin: Vec<_> = (0..=100).map(|t| (t as f64, t as f64 + 1.0)).collect();
        assert!(fit_exponential(&lin).unwrap().r2 < 0.99);
    }

    #[test]
    fn fit_skips_nonpositive() {
        let pts = [(0.0, 0.0), (1.0, -1.0), (2.0, 1.0), (3.0, 2.0)];
        assert!(fit_exponential(&pts).is_err());
    }

    #[test]
    fn series_steps_increase() {
        let mut s = DivergenceSeries::default();
        s.push(SeriesPoint {
            step: 1,
            l2: 1.0,
            barrier: 0.0,
        })
        .unwrap();
        assert!(s
            .push(SeriesPoint {
                step: 1,
                l2: 1.0,
                barrier: 0.0
            })
            .is_err());
    }

    #[test]
    fn identical_networks_have_exactly_zero_barrier() {
        let spec = NetSpec::mlp(5, &[16, 16], 3);
        let p = ParamSet::<f64>::init(&spec, &crate::rng::SeedPlan::new(4)).unwrap();
        let (train, _) = crate::dataset::gen_mixture::<f64>(&crate::dataset::MixtureSpec {
            n_classes: 3,
            dim: 5,
            n_train: 64,
            n_test: 8,
            ..Default::default()
        })
        .unwrap();
        for loss in [BarrierLoss::CrossEntropy, BarrierLoss::Error01] {
            let r = barrier(&p, &p, loss, &train, 11).unwrap();
            assert_eq!(r.barrier, 0.0);
            assert!(r.curve.iter().all(|c| c.loss == r.curve[0].loss));
        }
    }
}
