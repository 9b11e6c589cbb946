//! The training map: optimizers, learning-rate schedule, and the seeded loop.
//!
//! `train_range` is a pure function of its arguments. Batches come from the
//! `batch-order` stream keyed by epoch and the jitter from the `augment`
//! stream keyed by step, so splitting a run at any step and resuming with the
//! threaded optimizer state reproduces the uninterrupted run bit for bit.

use serde::{Deserialize, Serialize};

use crate::dataset::{augment, batch_indices, Dataset};
use crate::error::{LabError, Result};
use crate::nn::{loss_and_grad, ParamSet};
use crate::rng::SeedPlan;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adamw() -> Self {
        Optimizer::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Linear,
    Cosine,
    None,
}

/// What the two copies start from at the spawn point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpawnOptState {
    /// Both copies continue with a clone of the (unperturbed) state.
    Shared,
    /// Both copies restart with zeroed buffers.
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub decay: Decay,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub jitter_std: f64,
    pub spawn_opt_state: SpawnOptState,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Sgd { momentum: 0.9 },
            peak_lr: 0.1,
            warmup_frac: 0.02,
            decay: Decay::Linear,
            weight_decay: 0.0,
            batch_size: 128,
            total_steps: 5000,
            jitter_std: 0.0,
            spawn_opt_state: SpawnOptState::Shared,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr.is_nan() || self.peak_lr <= 0.0 || !self.peak_lr.is_finite() {
            return Err(LabError::Config(format!("peak_lr must be > 0, got {}", self.peak_lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(LabError::Config(format!(
                "warmup_frac {} not in [0, 1]",
                self.warmup_frac
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(LabError::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(LabError::Config("batch_size must be >= 1".into()));
        }
        if self.jitter_std < 0.0 {
            return Err(LabError::Config("jitter_std must be >= 0".into()));
        }
        Ok(())
    }

    /// Number of warm-up steps (may be fractional).
    pub fn warmup_steps(&self) -> f64 {
        self.warmup_frac * self.total_steps as f64
    }
}

/// Learning rate used for the update taken at `step`.
///
/// Linear ramp from 0 to `peak_lr` over the warm-up, then the configured
/// decay down to 0 at `total_steps`.
pub fn lr_at(config: &TrainConfig, step: usize) -> f64 {
    let s = step as f64;
    let warm = config.warmup_steps();
    let total = config.total_steps as f64;
    if s < warm {
        return config.peak_lr * s / warm;
    }
    let span = total - warm;
    let progress = if span > 0.0 {
        ((s - warm) / span).clamp(0.0, 1.0)
    } else {
        1.0
    };
    match config.decay {
        Decay::None => config.peak_lr,
        Decay::Linear => config.peak_lr * (1.0 - progress),
        Decay::Cosine => config.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
    }
}

/// Optimizer buffers in flat parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    pub step: usize,
    /// Momentum buffer (SGD) or first moment (AdamW).
    pub first: Vec<T>,
    /// Second moment (AdamW only, empty otherwise).
    pub second: Vec<T>,
}

impl<T: Scalar> OptState<T> {
    pub fn new(n_params: usize, optimizer: &Optimizer) -> Self {
        let second = match optimizer {
            Optimizer::AdamW { .. } => vec![T::zero(); n_params],
            Optimizer::Sgd { .. } => Vec::new(),
        };
        OptState {
            step: 0,
            first: vec![T::zero(); n_params],
            second,
        }
    }

    /// Same step counter, zeroed buffers.
    pub fn reset_buffers(&self) -> Self {
        OptState {
            step: self.step,
            first: vec![T::zero(); self.first.len()],
            second: vec![T::zero(); self.second.len()],
        }
    }
}

/// One optimizer update using `lr_at(opt.step)`.
pub fn step<T: Scalar>(
    params: &mut ParamSet<T>,
    opt: &mut OptState<T>,
    config: &TrainConfig,
    gradient: &ParamSet<T>,
) -> Result<()> {
    if let Some(bad) = gradient.values().position(|g| !g.is_finite()) {
        return Err(LabError::Diverged {
            step: opt.step,
            what: format!("non-finite gradient at flat index {bad}"),
        });
    }
    if opt.first.len() != params.n_params() {
        return Err(LabError::Shape("optimizer state does not match parameters".into()));
    }
    let lr = T::of(lr_at(config, opt.step));
    let decay = T::one() - lr * T::of(config.weight_decay);
    match config.optimizer {
        Optimizer::Sgd { momentum } => {
            let mu = T::of(momentum);
            for ((p, &g), m) in params.values_mut().zip(gradient.values()).zip(opt.first.iter_mut()) {
                *m = mu * *m + g;
                *p = *p * decay - lr * *m;
            }
        }
        Optimizer::AdamW { beta1, beta2, eps } => {
            if opt.second.len() != opt.first.len() {
                return Err(LabError::Shape("AdamW state lacks second moments".into()));
            }
            let t = (opt.step + 1) as i32;
            let bc1 = T::of(1.0 - beta1.powi(t));
            let bc2 = T::of(1.0 - beta2.powi(t));
            let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
            for (((p, &g), m), v) in params
                .values_mut()
                .zip(gradient.values())
                .zip(opt.first.iter_mut())
                .zip(opt.second.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    opt.step += 1;
    Ok(())
}

/// Read-only observer invoked at every step boundary in `[from, to]` with the
/// number of completed steps.
pub type Hook<'a, T> = &'a mut dyn FnMut(usize, &ParamSet<T>, &OptState<T>);

/// Applies the training map for steps `from..to`.
#[allow(clippy::too_many_arguments)]
pub fn train_range<T: Scalar>(
    mut params: ParamSet<T>,
    mut opt: OptState<T>,
    data: &Dataset<T>,
    config: &TrainConfig,
    seeds: &SeedPlan,
    from: usize,
    to: usize,
    mut hook: Option<Hook<'_, T>>,
) -> Result<(ParamSet<T>, OptState<T>)> {
    config.validate()?;
    if from > to || to > config.total_steps {
        return Err(LabError::Config(format!(
            "step range {from}..{to} outside [0, {}]",
            config.total_steps
        )));
    }
    if opt.step != from {
        return Err(LabError::Config(format!(
            "optimizer state is at step {}, range starts at {from}",
            opt.step
        )));
    }
    if config.batch_size > data.len() {
        return Err(LabError::Config(format!(
            "batch size {} exceeds {} training examples",
            config.batch_size,
            data.len()
        )));
    }
    for s in from..to {
        if let Some(h) = hook.as_mut() {
            h(s, &params, &opt);
        }
        let idx = batch_indices(data.len(), config.batch_size, s, seeds);
        let (mut x, y) = data.gather(&idx);
        augment(&mut x, s, seeds, config.jitter_std);
        let (_, g) = loss_and_grad(&params, x.view(), &y)?;
        step(&mut params, &mut opt, config, &g)?;
    }
    if let Some(h) = hook.as_mut() {
        h(to, &params, &opt);
    }
    Ok((params, opt))
}

/// Initializes from `seeds` and trains for the full schedule.
pub fn train_from_scratch<T: Scalar>(
    spec: &crate::nn::NetSpec,
    data: &Dataset<T>,
    config: &TrainConfig,
    seeds: &SeedPlan,
) -> Result<(ParamSet<T>, OptState<T>)> {
    let params = ParamSet::init(spec, seeds)?;
    let opt = OptState::new(params.n_params(), &config.optimizer);
    train_range(params, opt, data, config, seeds, 0, config.total_steps, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetSpec;

    fn cfg(peak: f64, warm: f64, t: usize, decay: Decay) -> TrainConfig {
        TrainConfig {
            peak_lr: peak,
            warmup_frac: warm,
            total_steps: t,
            decay,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn warmup_midpoint() {
        let c = cfg(0.1, 0.02, 25_000, Decay::Linear);
        assert!((lr_at(&c, 250) - 0.05).abs() < 1e-15);
        assert_eq!(lr_at(&c, 0), 0.0);
        assert!((lr_at(&c, 500) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn linear_decay_midpoint_and_end() {
        let c = cfg(0.1, 0.02, 25_000, Decay::Linear);
        assert!((lr_at(&c, (25_000 + 500) / 2) - 0.05).abs() < 1e-15);
        assert_eq!(lr_at(&c, 25_000), 0.0);
    }

    #[test]
    fn cosine_and_constant() {
        let c = cfg(0.2, 0.0, 100, Decay::Cosine);
        assert!((lr_at(&c, 0) - 0.2).abs() < 1e-15);
        assert!((lr_at(&c, 50) - 0.1).abs() < 1e-12);
        assert!(lr_at(&c, 100).abs() < 1e-15);
        let c = cfg(0.2, 0.0, 100, Decay::None);
        assert_eq!(lr_at(&c, 77), 0.2);
    }

    fn scalar_net(value: f64) -> ParamSet<f64> {
        // 1 -> 1 affine layer: a weight and a bias.
        let spec = NetSpec::mlp(1, &[], 1);
        ParamSet::from_flat(&spec, &[value, 0.0]).unwrap()
    }

    #[test]
    fn plain_sgd_step() {
        let c = TrainConfig {
            optimizer: Optimizer::Sgd { momentum: 0.0 },
            warmup_frac: 0.0,
            decay: Decay::None,
            ..TrainConfig::default()
        };
        let mut p = scalar_net(1.0);
        let g = ParamSet::from_flat(&p.spec, &[0.5, -2.0]).unwrap();
        let mut opt = OptState::new(2, &c.optimizer);
        step(&mut p, &mut opt, &c, &g).unwrap();
        assert_eq!(p.to_flat(), vec![1.0 - 0.1 * 0.5, 0.1 * 2.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let c = TrainConfig {
            warmup_frac: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar_net(0.7);
        let g = ParamSet::zeros(&p.spec);
        let mut opt = OptState::new(2, &c.optimizer);
        step(&mut p, &mut opt, &c, &g).unwrap();
        assert_eq!(p.to_flat(), vec![0.7, 0.0]);
    }

    #[test]
    fn adamw_first_step_against_recurrence() {
        let (b1, b2, eps, lr, wd) = (0.9, 0.999, 1e-8, 0.001, 0.01);
        let c = TrainConfig {
            optimizer: Optimizer::AdamW {
                beta1: b1,
                beta2: b2,
                eps,
            },
            peak_lr: lr,
            warmup_frac: 0.0,
            decay: Decay::None,
            weight_decay: wd,
            ..TrainConfig::default()
        };
        let theta = 2.0;
        let mut p = scalar_net(theta);
        let g = ParamSet::from_flat(&p.spec, &[1.0, 0.0]).unwrap();
        let mut opt = OptState::new(2, &c.optimizer);
        step(&mut p, &mut opt, &c, &g).unwrap();
        // m = 0.1, v = 0.001, bias corrected to 1 and 1.
        let m_hat = (1.0 - b1) / (1.0 - b1);
        let v_hat = (1.0 - b2) / (1.0 - b2);
        let expected = theta * (1.0 - lr * wd) - lr * m_hat / (f64::sqrt(v_hat) + eps);
        assert!((p.to_flat()[0] - expected).abs() < 1e-15);
        assert!((expected - (theta - 0.001 - 0.001 * 0.01 * 2.0)).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let c = TrainConfig::default();
        let mut p = scalar_net(1.0);
        let g = ParamSet::from_flat(&p.spec, &[f64::INFINITY, 0.0]).unwrap();
        let mut opt = OptState::new(2, &c.optimizer);
        assert!(matches!(
            step(&mut p, &mut opt, &c, &g),
            Err(LabError::Diverged { step: 0, .. })
        ));
    }
}
