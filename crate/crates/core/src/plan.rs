//! Experiment plans: the grid of cells and every knob of a run.
//!
//! Plans are flat `key = value` text. Grid keys (`times`, `sigmas`, `kinds`,
//! `masks`, `seeds`, `modes`) may repeat and accept comma-separated lists;
//! every other key is scalar and the last occurrence wins. CLI flags use the
//! same names with dashes.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::{gen_mixture, load_idx, Dataset, MixtureSpec, Split};
use crate::error::{LabError, Result};
use crate::nn::NetSpec;
use crate::perturb::{MaskSpec, PerturbKind};
use crate::train::{Decay, Optimizer, SpawnOptState, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Mixture(MixtureSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<(Dataset<f64>, Dataset<f64>)> {
        match self {
            DataSource::Mixture(spec) => gen_mixture(spec),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(train_images, train_labels, Split::Train)?;
                let mut test = load_idx(test_images, test_labels, Split::Test)?;
                let k = train.n_classes.max(test.n_classes);
                let mut train = train;
                train.n_classes = k;
                test.n_classes = k;
                Ok((train, test))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One perturbation at `t`, identical training noise afterwards.
    Butterfly,
    /// No perturbation; independent training noise after `t`.
    Spawning,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Butterfly => "butterfly",
            Mode::Spawning => "spawning",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SigmaSpec {
    Value(f64),
    /// Matched to the SGD noise scale at the perturbation step.
    SgdMatched,
}

impl SigmaSpec {
    pub fn label(&self) -> String {
        match self {
            SigmaSpec::Value(v) => format!("{v}"),
            SigmaSpec::SgdMatched => "sgd".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricToggles {
    pub barrier: bool,
    pub barrier_wm: bool,
    pub barrier_am: bool,
    pub cka: bool,
    pub ensemble: bool,
    pub series: bool,
}

impl Default for MetricToggles {
    fn default() -> Self {
        MetricToggles {
            barrier: true,
            barrier_wm: true,
            barrier_am: true,
            cka: true,
            ensemble: true,
            series: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub hidden: Vec<usize>,
    pub layer_norm: bool,
    pub data: DataSource,
    pub train: TrainConfig,
    pub times: Vec<f64>,
    pub sigmas: Vec<SigmaSpec>,
    pub kinds: Vec<PerturbKind>,
    /// Mask labels (`all`, `norm`, `single`, `fraction:<f>`).
    pub masks: Vec<String>,
    pub mask_seed: u64,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    pub metrics: MetricToggles,
    pub n_alphas: usize,
    pub probe: usize,
    pub match_passes: usize,
    pub perturb_batch: usize,
    pub noise_pairs: usize,
    pub series_every: usize,
    pub series_subsample: usize,
    pub barrier_subsample: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            hidden: vec![128, 128, 128],
            layer_norm: true,
            data: DataSource::Mixture(MixtureSpec::default()),
            train: TrainConfig::default(),
            times: vec![0.0],
            sigmas: vec![SigmaSpec::Value(1e-4)],
            kinds: vec![PerturbKind::Batch],
            masks: vec!["all".into()],
            mask_seed: 0,
            seeds: vec![0],
            modes: vec![Mode::Butterfly],
            metrics: MetricToggles::default(),
            n_alphas: 11,
            probe: crate::repsim::DEFAULT_PROBE,
            match_passes: 100,
            perturb_batch: 128,
            noise_pairs: 64,
            series_every: 250,
            series_subsample: 2048,
            barrier_subsample: None,
            checkpoint_dir: None,
        }
    }
}

/// Keys that accumulate across occurrences.
pub const GRID_KEYS: [&str; 6] = ["times", "sigmas", "kinds", "masks", "seeds", "modes"];

/// Every key a plan understands, in the order `to_text` writes them.
pub const PLAN_KEYS: [&str; 49] = [
    "hidden",
    "layer_norm",
    "classes",
    "dim",
    "n_train",
    "n_test",
    "separation",
    "noise_std",
    "data_seed",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "optimizer",
    "lr",
    "warmup",
    "decay",
    "momentum",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "batch_size",
    "steps",
    "jitter",
    "spawn_opt_state",
    "times",
    "sigmas",
    "kinds",
    "masks",
    "mask_seed",
    "seeds",
    "modes",
    "barrier",
    "barrier_wm",
    "barrier_am",
    "cka",
    "ensemble",
    "series",
    "n_alphas",
    "probe",
    "match_passes",
    "perturb_batch",
    "noise_pairs",
    "series_every",
    "series_subsample",
    "barrier_subsample",
    "checkpoint_dir",
    "base_seed",
];

/// Singular spellings accepted for grid keys.
pub const KEY_ALIASES: [(&str, &str); 4] = [
    ("kind", "kinds"),
    ("sigma", "sigmas"),
    ("mask", "masks"),
    ("perturb_step", "times"),
];

/// Maps aliases onto canonical keys. `fraction = f` is shorthand for
/// `masks = fraction:f`.
pub fn canonical_pair(key: &str, value: &str) -> (String, String) {
    let key = key.trim().replace('-', "_");
    if key == "fraction" {
        return ("masks".into(), format!("fraction:{}", value.trim()));
    }
    let key = KEY_ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map_or(key.clone(), |(_, k)| k.to_string());
    (key, value.trim().to_string())
}

/// Splits plan text into `(key, value)` pairs. Blank lines and `#` comments
/// are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| LabError::Config(format!("plan line {}: expected key = value, got {raw:?}", n + 1)))?;
        out.push(canonical_pair(k, v));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| LabError::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(LabError::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

impl ExperimentPlan {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Builds a plan from defaults plus `pairs`. Grid keys given at least once
    /// replace the default list.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut plan = ExperimentPlan::default();
        let mut mixture = MixtureSpec::default();
        let mut idx: [Option<PathBuf>; 4] = Default::default();
        let mut momentum = 0.9;
        let (mut beta1, mut beta2, mut adam_eps) = (0.9, 0.999, 1e-8);
        let mut optimizer = "sgd".to_string();
        let mut cleared = std::collections::HashSet::new();
        for (key, v) in pairs {
            let (key, v) = canonical_pair(key, v);
            let v = &v;
            let k = key.as_str();
            if GRID_KEYS.contains(&k) && cleared.insert(key.clone()) {
                match k {
                    "times" => plan.times.clear(),
                    "sigmas" => plan.sigmas.clear(),
                    "kinds" => plan.kinds.clear(),
                    "masks" => plan.masks.clear(),
                    "seeds" => plan.seeds.clear(),
                    _ => plan.modes.clear(),
                }
            }
            match k {
                "hidden" => plan.hidden = list(v).map(|s| parse(k, s)).collect::<Result<_>>()?,
                "layer_norm" => plan.layer_norm = parse_bool(k, v)?,
                "classes" => mixture.n_classes = parse(k, v)?,
                "dim" => mixture.dim = parse(k, v)?,
                "n_train" => mixture.n_train = parse(k, v)?,
                "n_test" => mixture.n_test = parse(k, v)?,
                "separation" => mixture.separation = parse(k, v)?,
                "noise_std" => mixture.noise_std = parse(k, v)?,
                "data_seed" => mixture.seed = parse(k, v)?,
                "train_images" => idx[0] = Some(v.into()),
                "train_labels" => idx[1] = Some(v.into()),
                "test_images" => idx[2] = Some(v.into()),
                "test_labels" => idx[3] = Some(v.into()),
                "optimizer" => optimizer = v.to_lowercase(),
                "lr" => plan.train.peak_lr = parse(k, v)?,
                "warmup" => plan.train.warmup_frac = parse(k, v)?,
                "decay" => {
                    plan.train.decay = match v.as_str() {
                        "linear" => Decay::Linear,
                        "cosine" => Decay::Cosine,
                        "none" | "constant" => Decay::None,
                        _ => return Err(LabError::Config(format!("unknown decay {v:?}"))),
                    }
                }
                "momentum" => momentum = parse(k, v)?,
                "beta1" => beta1 = parse(k, v)?,
                "beta2" => beta2 = parse(k, v)?,
                "adam_eps" => adam_eps = parse(k, v)?,
                "weight_decay" => plan.train.weight_decay = parse(k, v)?,
                "batch_size" => plan.train.batch_size = parse(k, v)?,
                "steps" => plan.train.total_steps = parse(k, v)?,
                "jitter" => plan.train.jitter_std = parse(k, v)?,
                "spawn_opt_state" => {
                    plan.train.spawn_opt_state = match v.as_str() {
                        "shared" => SpawnOptState::Shared,
                        "reset" => SpawnOptState::Reset,
                        _ => return Err(LabError::Config(format!("unknown spawn_opt_state {v:?}"))),
                    }
                }
                "times" => {
                    for s in list(v) {
                        plan.times.push(parse(k, s)?);
                    }
                }
                "sigmas" => {
                    for s in list(v) {
                        plan.sigmas.push(match s {
                            "sgd" | "sgd-noise" => SigmaSpec::SgdMatched,
                            _ => SigmaSpec::Value(parse(k, s)?),
                        });
                    }
                }
                "kinds" => {
                    for s in list(v) {
                        plan.kinds.push(s.parse()?);
                    }
                }
                "masks" => {
                    for s in list(v) {
                        MaskSpec::parse(s, 0)?;
                        plan.masks.push(s.to_string());
                    }
                }
                "mask_seed" => plan.mask_seed = parse(k, v)?,
                "seeds" | "base_seed" => {
                    if k == "base_seed" {
                        plan.seeds.clear();
                        cleared.insert("seeds".into());
                    }
                    for s in list(v) {
                        plan.seeds.push(parse(k, s)?);
                    }
                }
                "modes" => {
                    for s in list(v) {
                        plan.modes.push(match s {
                            "butterfly" | "perturb" => Mode::Butterfly,
                            "spawning" | "independent" => Mode::Spawning,
                            _ => return Err(LabError::Config(format!("unknown mode {s:?}"))),
                        });
                    }
                }
                "barrier" => plan.metrics.barrier = parse_bool(k, v)?,
                "barrier_wm" => plan.metrics.barrier_wm = parse_bool(k, v)?,
                "barrier_am" => plan.metrics.barrier_am = parse_bool(k, v)?,
                "cka" => plan.metrics.cka = parse_bool(k, v)?,
                "ensemble" => plan.metrics.ensemble = parse_bool(k, v)?,
                "series" => plan.metrics.series = parse_bool(k, v)?,
                "n_alphas" => plan.n_alphas = parse(k, v)?,
                "probe" => plan.probe = parse(k, v)?,
                "match_passes" => plan.match_passes = parse(k, v)?,
                "perturb_batch" => plan.perturb_batch = parse(k, v)?,
                "noise_pairs" => plan.noise_pairs = parse(k, v)?,
                "series_every" => plan.series_every = parse(k, v)?,
                "series_subsample" => plan.series_subsample = parse(k, v)?,
                "barrier_subsample" => {
                    plan.barrier_subsample = match v.as_str() {
                        "none" | "" => None,
                        _ => Some(parse(k, v)?),
                    }
                }
                "checkpoint_dir" => plan.checkpoint_dir = Some(v.into()),
                _ => return Err(LabError::Config(format!("unknown plan key {key:?}"))),
            }
        }
        plan.train.optimizer = match optimizer.as_str() {
            "sgd" => Optimizer::Sgd { momentum },
            "adamw" => Optimizer::AdamW {
                beta1,
                beta2,
                eps: adam_eps,
            },
            _ => return Err(LabError::Config(format!("unknown optimizer {optimizer:?}"))),
        };
        plan.data = match idx {
            [None, None, None, None] => DataSource::Mixture(mixture),
            [Some(a), Some(b), Some(c), Some(d)] => DataSource::Idx {
                train_images: a,
                train_labels: b,
                test_images: c,
                test_labels: d,
            },
            _ => {
                return Err(LabError::Config(
                    "IDX data needs train_images, train_labels, test_images and test_labels".into(),
                ))
            }
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.hidden.contains(&0) {
            return Err(LabError::Config("hidden widths must be >= 1".into()));
        }
        if let Some(t) = self.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(LabError::Config(format!(
                "perturbation time fraction {t} not in [0, 1]"
            )));
        }
        if let Some(s) = self
            .sigmas
            .iter()
            .find(|s| matches!(s, SigmaSpec::Value(v) if v.is_nan() || *v < 0.0))
        {
            return Err(LabError::Config(format!("sigma {s:?} must be >= 0")));
        }
        for m in &self.masks {
            MaskSpec::parse(m, self.mask_seed)?;
        }
        if self.n_alphas < 2 {
            return Err(LabError::Config("n_alphas must be >= 2".into()));
        }
        if self.series_every == 0 {
            return Err(LabError::Config("series_every must be >= 1".into()));
        }
        if self.times.is_empty() || self.seeds.is_empty() || self.modes.is_empty() {
            return Err(LabError::Config("plan needs at least one time, seed and mode".into()));
        }
        if self.modes.contains(&Mode::Butterfly)
            && (self.sigmas.is_empty() || self.kinds.is_empty() || self.masks.is_empty())
        {
            return Err(LabError::Config("butterfly cells need sigmas, kinds and masks".into()));
        }
        Ok(())
    }

    /// The network for a dataset with `input_dim` features and `n_classes`.
    pub fn net_spec(&self, input_dim: usize, n_classes: usize) -> NetSpec {
        NetSpec {
            input_dim,
            hidden: self.hidden.clone(),
            n_classes,
            layer_norm: vec![self.layer_norm; self.hidden.len()],
        }
    }

    /// Perturbation step for a time fraction, rounded half up.
    pub fn resolve_step(&self, t_frac: f64) -> usize {
        ((t_frac * self.train.total_steps as f64) + 0.5).floor() as usize
    }

    /// All cells in plan order: mode, time, kind, mask, sigma, then seed.
    /// Spawning cells ignore kind, mask and sigma.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &t_frac in &self.times {
                let t_step = self.resolve_step(t_frac);
                match mode {
                    Mode::Spawning => {
                        for &seed in &self.seeds {
                            out.push(Cell {
                                mode,
                                seed,
                                t_frac,
                                t_step,
                                kind: None,
                                mask: None,
                                sigma: SigmaSpec::Value(0.0),
                            });
                        }
                    }
                    Mode::Butterfly => {
                        for &kind in &self.kinds {
                            for m in &self.masks {
                                let mask = MaskSpec::parse(m, self.mask_seed).expect("validated");
                                for &sigma in &self.sigmas {
                                    for &seed in &self.seeds {
                                        out.push(Cell {
                                            mode,
                                            seed,
                                            t_frac,
                                            t_step,
                                            kind: Some(kind),
                                            mask: Some(mask),
                                            sigma,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Resolved plan as plan text; feeding it back yields the same plan.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: Vec<String>| v.join(", ");
        let _ = writeln!(
            s,
            "hidden = {}",
            join(self.hidden.iter().map(ToString::to_string).collect())
        );
        let _ = writeln!(s, "layer_norm = {}", self.layer_norm);
        match &self.data {
            DataSource::Mixture(m) => {
                let _ = writeln!(s, "classes = {}", m.n_classes);
                let _ = writeln!(s, "dim = {}", m.dim);
                let _ = writeln!(s, "n_train = {}", m.n_train);
                let _ = writeln!(s, "n_test = {}", m.n_test);
                let _ = writeln!(s, "separation = {}", m.separation);
                let _ = writeln!(s, "noise_std = {}", m.noise_std);
                let _ = writeln!(s, "data_seed = {}", m.seed);
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let _ = writeln!(s, "train_images = {}", train_images.display());
                let _ = writeln!(s, "train_labels = {}", train_labels.display());
                let _ = writeln!(s, "test_images = {}", test_images.display());
                let _ = writeln!(s, "test_labels = {}", test_labels.display());
            }
        }
        let t = &self.train;
        match t.optimizer {
            Optimizer::Sgd { momentum } => {
                let _ = writeln!(s, "optimizer = sgd\nmomentum = {momentum}");
            }
            Optimizer::AdamW { beta1, beta2, eps } => {
                let _ = writeln!(
                    s,
                    "optimizer = adamw\nbeta1 = {beta1}\nbeta2 = {beta2}\nadam_eps = {eps}"
                );
            }
        }
        let decay = match t.decay {
            Decay::Linear => "linear",
            Decay::Cosine => "cosine",
            Decay::None => "none",
        };
        let spawn = match t.spawn_opt_state {
            SpawnOptState::Shared => "shared",
            SpawnOptState::Reset => "reset",
        };
        let _ = writeln!(s, "lr = {}\nwarmup = {}\ndecay = {decay}", t.peak_lr, t.warmup_frac);
        let _ = writeln!(
            s,
            "weight_decay = {}\nbatch_size = {}\nsteps = {}",
            t.weight_decay, t.batch_size, t.total_steps
        );
        let _ = writeln!(s, "jitter = {}\nspawn_opt_state = {spawn}", t.jitter_std);
        let _ = writeln!(
            s,
            "times = {}",
            join(self.times.iter().map(|v| format!("{v}")).collect())
        );
        let _ = writeln!(
            s,
            "sigmas = {}",
            join(self.sigmas.iter().map(SigmaSpec::label).collect())
        );
        let _ = writeln!(
            s,
            "kinds = {}",
            join(self.kinds.iter().map(|k| k.name().to_string()).collect())
        );
        let _ = writeln!(s, "masks = {}", self.masks.join(", "));
        let _ = writeln!(s, "mask_seed = {}", self.mask_seed);
        let _ = writeln!(
            s,
            "seeds = {}",
            join(self.seeds.iter().map(ToString::to_string).collect())
        );
        let _ = writeln!(
            s,
            "modes = {}",
            join(self.modes.iter().map(|m| m.name().to_string()).collect())
        );
        let m = &self.metrics;
        let _ = writeln!(
            s,
            "barrier = {}\nbarrier_wm = {}\nbarrier_am = {}\ncka = {}\nensemble = {}\nseries = {}",
            m.barrier, m.barrier_wm, m.barrier_am, m.cka, m.ensemble, m.series
        );
        let _ = writeln!(
            s,
            "n_alphas = {}\nprobe = {}\nmatch_passes = {}",
            self.n_alphas, self.probe, self.match_passes
        );
        let _ = writeln!(
            s,
            "perturb_batch = {}\nnoise_pairs = {}",
            self.perturb_batch, self.noise_pairs
        );
        let _ = writeln!(
            s,
            "series_every = {}\nseries_subsample = {}",
            self.series_every, self.series_subsample
        );
        let _ = writeln!(
            s,
            "barrier_subsample = {}",
            self.barrier_subsample.map_or("none".to_string(), |v| v.to_string())
        );
        if let Some(d) = &self.checkpoint_dir {
            let _ = writeln!(s, "checkpoint_dir = {}", d.display());
        }
        s
    }
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mode: Mode,
    pub seed: u64,
    pub t_frac: f64,
    pub t_step: usize,
    pub kind: Option<PerturbKind>,
    pub mask: Option<MaskSpec>,
    pub sigma: SigmaSpec,
}
