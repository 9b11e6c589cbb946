//! Spawn-and-perturb runs, metric collection and resumable sweeps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;

use crate::align::{activation_match, fixed_fraction, permute, weight_match};
use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::divergence::{barrier, ensemble_eval, l2, BarrierLoss, DivergenceSeries, SeriesField, SeriesPoint};
use crate::error::{LabError, Result};
use crate::nn::{accuracy, forward, loss_ce, NetSpec, ParamSet};
use crate::perturb::{apply, build_mask, expected_init_norm, perturbation, sgd_noise_scale, PerturbSpec};
use crate::plan::{Cell, ExperimentPlan, Mode, SigmaSpec};
use crate::repsim::{angular_cka, probe_indices, probe_representations};
use crate::rng::SeedPlan;
use crate::train::{train_range, OptState, SpawnOptState};

/// Branch id for the second copy's training noise in spawning runs.
pub const SPAWN_BRANCH: u64 = 1;

pub const CSV_HEADER: [&str; 22] = [
    "mode",
    "seed",
    "t_frac",
    "t_step",
    "kind",
    "mask",
    "sigma",
    "l2",
    "barrier_ce_train",
    "barrier_err_test",
    "barrier_wm",
    "barrier_am",
    "fixed_frac_wm",
    "cka_angle",
    "ensemble_acc",
    "acc_a",
    "acc_b",
    "ce_a",
    "ce_b",
    "lambda_l2",
    "r2_l2",
    "wall_s",
];

/// Metrics comparing the two children of one cell. Disabled or failed
/// metrics are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    pub l2: f64,
    pub barrier_ce_train: f64,
    pub barrier_err_test: f64,
    pub barrier_wm: f64,
    pub barrier_am: f64,
    pub fixed_frac_wm: f64,
    pub cka_angle: f64,
    pub ensemble_acc: f64,
    pub acc_a: f64,
    pub acc_b: f64,
    pub ce_a: f64,
    pub ce_b: f64,
    pub lambda_l2: f64,
    pub r2_l2: f64,
}

impl PairMetrics {
    pub fn nan() -> Self {
        let n = f64::NAN;
        PairMetrics {
            l2: n,
            barrier_ce_train: n,
            barrier_err_test: n,
            barrier_wm: n,
            barrier_am: n,
            fixed_frac_wm: n,
            cka_angle: n,
            ensemble_acc: n,
            acc_a: n,
            acc_b: n,
            ce_a: n,
            ce_b: n,
            lambda_l2: n,
            r2_l2: n,
        }
    }

    fn values(&self) -> [f64; 14] {
        [
            self.l2,
            self.barrier_ce_train,
            self.barrier_err_test,
            self.barrier_wm,
            self.barrier_am,
            self.fixed_frac_wm,
            self.cka_angle,
            self.ensemble_acc,
            self.acc_a,
            self.acc_b,
            self.ce_a,
            self.ce_b,
            self.lambda_l2,
            self.r2_l2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub cell: Cell,
    /// Perturbation scale actually applied (0 for spawning cells).
    pub sigma: f64,
    pub metrics: PairMetrics,
    pub wall_s: f64,
    pub error: Option<String>,
    pub series: Option<DivergenceSeries>,
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

impl RunRecord {
    /// The columns that identify a cell, joined as in the CSV.
    pub fn key(&self) -> String {
        cell_key(&self.cell, self.sigma)
    }

    pub fn to_csv_row(&self) -> String {
        let c = &self.cell;
        let mode = match &self.error {
            None => c.mode.name().to_string(),
            Some(_) => format!("{}-error", c.mode.name()),
        };
        let mut cols = vec![
            mode,
            c.seed.to_string(),
            fmt(c.t_frac),
            c.t_step.to_string(),
            c.kind.map_or("none".into(), |k| k.name().to_string()),
            c.mask.map_or("none".into(), |m| m.label()),
            fmt(self.sigma),
        ];
        cols.extend(self.metrics.values().iter().map(|&v| fmt(v)));
        cols.push(format!("{:.3}", self.wall_s));
        cols.join(",")
    }
}

fn cell_key(cell: &Cell, sigma: f64) -> String {
    format!(
        "{},{},{},{},{},{}",
        cell.mode.name(),
        cell.seed,
        fmt(cell.t_frac),
        cell.kind.map_or("none".into(), |k| k.name().to_string()),
        cell.mask.map_or("none".into(), |m| m.label()),
        fmt(sigma)
    )
}

/// Key of a CSV row, or `None` for error rows (which are retried).
fn row_key(line: &str) -> Option<String> {
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != CSV_HEADER.len() || cols[0].ends_with("-error") {
        return None;
    }
    Some(format!(
        "{},{},{},{},{},{}",
        cols[0], cols[1], cols[2], cols[4], cols[5], cols[6]
    ))
}

/// Parameters kept at selected steps.
type Kept = BTreeMap<usize, ParamSet<f64>>;

/// Training state at one step of a trunk run. Optimizer buffers are kept only
/// at perturbation steps.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub params: ParamSet<f64>,
    pub opt: Option<OptState<f64>>,
}

/// One full unperturbed run of a seed with states captured along the way.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub seed: u64,
    pub snapshots: BTreeMap<usize, Snapshot>,
    pub final_params: ParamSet<f64>,
}

impl Trunk {
    fn state_at(&self, step: usize) -> Result<(ParamSet<f64>, OptState<f64>)> {
        match self.snapshots.get(&step) {
            Some(Snapshot { params, opt: Some(opt) }) => Ok((params.clone(), opt.clone())),
            _ => Err(LabError::Config(format!(
                "trunk for seed {} has no state at step {step}",
                self.seed
            ))),
        }
    }
}

/// Loaded data and derived evaluation subsets for one plan.
pub struct Lab {
    pub plan: ExperimentPlan,
    pub spec: NetSpec,
    pub train: Dataset<f64>,
    pub test: Dataset<f64>,
    barrier_set: Option<Dataset<f64>>,
    series_set: Dataset<f64>,
}

fn subset(data: &Dataset<f64>, m: usize, branch: u64) -> Result<Dataset<f64>> {
    let idx = probe_indices(data.len(), m, &SeedPlan::new(0).fork(branch))?;
    let (x, y) = data.gather(&idx);
    Dataset::new(x, y, data.n_classes, data.split)
}

impl Lab {
    pub fn new(plan: ExperimentPlan) -> Result<Self> {
        let (train, test) = plan.data.load()?;
        Self::with_data(plan, train, test)
    }

    pub fn with_data(plan: ExperimentPlan, train: Dataset<f64>, test: Dataset<f64>) -> Result<Self> {
        plan.validate()?;
        if train.dim() != test.dim() {
            return Err(LabError::Shape(format!(
                "train inputs have {} features, test inputs {}",
                train.dim(),
                test.dim()
            )));
        }
        let spec = plan.net_spec(train.dim(), train.n_classes.max(test.n_classes));
        spec.validate()?;
        let barrier_set = match plan.barrier_subsample {
            Some(m) if m < train.len() => Some(subset(&train, m, 1)?),
            _ => None,
        };
        let series_set = if plan.series_subsample < train.len() {
            subset(&train, plan.series_subsample, 2)?
        } else {
            train.clone()
        };
        Ok(Lab {
            plan,
            spec,
            train,
            test,
            barrier_set,
            series_set,
        })
    }

    /// Training split used for cross-entropy barriers.
    pub fn barrier_set(&self) -> &Dataset<f64> {
        self.barrier_set.as_ref().unwrap_or(&self.train)
    }

    pub fn seeds(&self, seed: u64) -> SeedPlan {
        SeedPlan::new(seed)
    }

    /// Steps at which a child starting at `t` is compared to its sibling.
    pub fn series_steps(&self, t: usize) -> Vec<usize> {
        let total = self.plan.train.total_steps;
        let every = self.plan.series_every;
        let mut steps = BTreeSet::from([t, total]);
        steps.extend((t..=total).filter(|s| s % every == 0));
        steps.into_iter().collect()
    }

    /// Trains seed `seed` from scratch to the end, keeping full states at
    /// `states` and parameters at `params_only`.
    pub fn trunk(&self, seed: u64, states: &BTreeSet<usize>, params_only: &BTreeSet<usize>) -> Result<Trunk> {
        if params_only.is_empty() {
            if let Some(t) = self.load_trunk(seed, states) {
                return Ok(t);
            }
        }
        let seeds = self.seeds(seed);
        let cfg = &self.plan.train;
        let init = ParamSet::init(&self.spec, &seeds)?;
        let opt = OptState::new(init.n_params(), &cfg.optimizer);
        let mut snapshots = BTreeMap::new();
        let mut hook = |s: usize, p: &ParamSet<f64>, o: &OptState<f64>| {
            if states.contains(&s) {
                snapshots.insert(
                    s,
                    Snapshot {
                        params: p.clone(),
                        opt: Some(o.clone()),
                    },
                );
            } else if params_only.contains(&s) {
                snapshots.insert(
                    s,
                    Snapshot {
                        params: p.clone(),
                        opt: None,
                    },
                );
            }
        };
        let (final_params, final_opt) =
            train_range(init, opt, &self.train, cfg, &seeds, 0, cfg.total_steps, Some(&mut hook))?;
        let trunk = Trunk {
            seed,
            snapshots,
            final_params,
        };
        self.save_trunk(&trunk, &final_opt, states);
        Ok(trunk)
    }

    fn checkpoint_path(&self, seed: u64, step: usize) -> Option<PathBuf> {
        self.plan
            .checkpoint_dir
            .as_ref()
            .map(|d| d.join(format!("seed{seed}_step{step}.ckpt")))
    }

    fn save_trunk(&self, trunk: &Trunk, final_opt: &OptState<f64>, states: &BTreeSet<usize>) {
        let total = self.plan.train.total_steps;
        for &s in states.iter().chain(std::iter::once(&total)) {
            let Some(path) = self.checkpoint_path(trunk.seed, s) else {
                return;
            };
            let (p, o) = if s == total {
                (trunk.final_params.clone(), final_opt.clone())
            } else {
                match trunk.state_at(s) {
                    Ok(st) => st,
                    Err(_) => continue,
                }
            };
            let ck = Checkpoint::new(p, o, self.plan.train.clone(), trunk.seed, Some(self.plan.data.clone()));
            if let Err(e) = ck.save(&path) {
                log::warn!("could not write checkpoint: {e}");
            }
        }
    }

    fn load_trunk(&self, seed: u64, states: &BTreeSet<usize>) -> Option<Trunk> {
        let total = self.plan.train.total_steps;
        let mut snapshots = BTreeMap::new();
        let mut final_params = None;
        for &s in states.iter().chain(std::iter::once(&total)) {
            let path = self.checkpoint_path(seed, s)?;
            if !path.exists() {
                return None;
            }
            let ck = match Checkpoint::<f64>::load(&path) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("ignoring unreadable checkpoint: {e}");
                    return None;
                }
            };
            let h = &ck.header;
            if h.net != self.spec || h.config != self.plan.train || h.base_seed != seed || h.step != s {
                log::warn!("checkpoint {} does not match this plan; retraining", path.display());
                return None;
            }
            if s == total {
                final_params = Some(ck.params.clone());
            }
            snapshots.insert(
                s,
                Snapshot {
                    params: ck.params,
                    opt: Some(ck.opt),
                },
            );
        }
        log::info!("seed {seed}: trunk restored from checkpoints");
        Some(Trunk {
            seed,
            snapshots,
            final_params: final_params?,
        })
    }

    /// Perturbation scale for `cell`, resolving SGD-matched sigmas at the
    /// state `params` reached at the cell's step.
    pub fn resolve_sigma(&self, cell: &Cell, params: &ParamSet<f64>) -> Result<f64> {
        match (cell.mode, cell.sigma) {
            (Mode::Spawning, _) => Ok(0.0),
            (Mode::Butterfly, SigmaSpec::Value(v)) => Ok(v),
            (Mode::Butterfly, SigmaSpec::SgdMatched) => {
                let seeds = self.seeds(cell.seed);
                let scale = sgd_noise_scale(
                    params,
                    &self.train,
                    &self.plan.train,
                    &seeds,
                    cell.t_step,
                    self.plan.noise_pairs,
                )?;
                let mask = build_mask(&cell.mask.expect("butterfly cell has a mask"), &self.spec, &seeds)?;
                Ok(scale / expected_init_norm(&self.spec, &mask)?)
            }
        }
    }

    /// Starting state of the second child: perturbed parameters for
    /// butterfly cells, an exact copy for spawning cells.
    pub fn second_start(&self, cell: &Cell, sigma: f64, params: &ParamSet<f64>) -> Result<ParamSet<f64>> {
        match cell.mode {
            Mode::Spawning => Ok(params.clone()),
            Mode::Butterfly => {
                let spec = PerturbSpec {
                    kind: cell.kind.expect("butterfly cell has a kind"),
                    sigma,
                    mask: cell.mask.expect("butterfly cell has a mask"),
                    step: cell.t_step,
                    batch_size: self.plan.perturb_batch,
                };
                let (eps, _) = perturbation(params, &self.train, &spec, &self.seeds(cell.seed))?;
                apply(params, &eps, sigma)
            }
        }
    }

    fn second_seeds(&self, cell: &Cell) -> SeedPlan {
        match cell.mode {
            Mode::Butterfly => self.seeds(cell.seed),
            Mode::Spawning => self.seeds(cell.seed).fork(SPAWN_BRANCH),
        }
    }

    fn child_opt(&self, opt: &OptState<f64>) -> OptState<f64> {
        match self.plan.train.spawn_opt_state {
            SpawnOptState::Shared => opt.clone(),
            SpawnOptState::Reset => opt.reset_buffers(),
        }
    }

    /// Trains the first child from `t`, keeping parameters at `keep`.
    fn train_first(
        &self,
        cell: &Cell,
        params: ParamSet<f64>,
        opt: &OptState<f64>,
        keep: &BTreeSet<usize>,
    ) -> Result<(ParamSet<f64>, Kept)> {
        let mut kept = BTreeMap::new();
        let mut hook = |s: usize, p: &ParamSet<f64>, _: &OptState<f64>| {
            if keep.contains(&s) {
                kept.insert(s, p.clone());
            }
        };
        let cfg = &self.plan.train;
        let (a, _) = train_range(
            params,
            self.child_opt(opt),
            &self.train,
            cfg,
            &self.seeds(cell.seed),
            cell.t_step,
            cfg.total_steps,
            Some(&mut hook),
        )?;
        Ok((a, kept))
    }

    /// Trains the second child from `t`, comparing it with the first child's
    /// parameters in `first` at every step present there.
    fn train_second(
        &self,
        cell: &Cell,
        start: ParamSet<f64>,
        opt: &OptState<f64>,
        first: &BTreeMap<usize, ParamSet<f64>>,
    ) -> Result<(ParamSet<f64>, Option<DivergenceSeries>)> {
        let mut series = DivergenceSeries::default();
        let mut failure = None;
        let series_set = &self.series_set;
        let n_alphas = self.plan.n_alphas;
        let mut hook = |s: usize, p: &ParamSet<f64>, _: &OptState<f64>| {
            let Some(a) = first.get(&s) else { return };
            if failure.is_some() {
                return;
            }
            let point = l2(a, p).and_then(|d| {
                let b = barrier(a, p, BarrierLoss::CrossEntropy, series_set, n_alphas)?;
                Ok(SeriesPoint {
                    step: s,
                    l2: d,
                    barrier: b.barrier,
                })
            });
            match point.and_then(|pt| series.push(pt)) {
                Ok(()) => {}
                Err(e) => failure = Some(e),
            }
        };
        let cfg = &self.plan.train;
        let (b, _) = train_range(
            start,
            self.child_opt(opt),
            &self.train,
            cfg,
            &self.second_seeds(cell),
            cell.t_step,
            cfg.total_steps,
            Some(&mut hook),
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        Ok((b, (!first.is_empty()).then_some(series)))
    }

    /// Runs one cell against a trunk that holds the state at the cell's step.
    pub fn run_cell_from(&self, cell: &Cell, trunk: &Trunk, sigma: Option<f64>) -> RunRecord {
        let started = Instant::now();
        let mut sigma_used = sigma.unwrap_or(f64::NAN);
        let out = (|| -> Result<(PairMetrics, Option<DivergenceSeries>)> {
            let (theta, opt) = trunk.state_at(cell.t_step)?;
            let sigma = match sigma {
                Some(s) => s,
                None => self.resolve_sigma(cell, &theta)?,
            };
            sigma_used = sigma;
            let series_on = self.plan.metrics.series;
            let steps: BTreeSet<usize> = if series_on {
                self.series_steps(cell.t_step).into_iter().collect()
            } else {
                BTreeSet::new()
            };
            let reuse = self.plan.train.spawn_opt_state == SpawnOptState::Shared
                && steps.iter().all(|s| trunk.snapshots.contains_key(s));
            let (a, first) = if reuse {
                let kept = steps.iter().map(|&s| (s, trunk.snapshots[&s].params.clone())).collect();
                (trunk.final_params.clone(), kept)
            } else {
                self.train_first(cell, theta.clone(), &opt, &steps)?
            };
            let start = self.second_start(cell, sigma, &theta)?;
            let (b, series) = self.train_second(cell, start, &opt, &first)?;
            let mut m = self.measure(&a, &b, cell.seed)?;
            if let Some(s) = &series {
                if let Ok(fit) = s.fit(SeriesField::L2) {
                    m.lambda_l2 = fit.rate;
                    m.r2_l2 = fit.r2;
                }
            }
            Ok((m, series))
        })();
        let wall_s = started.elapsed().as_secs_f64();
        match out {
            Ok((metrics, series)) => RunRecord {
                cell: *cell,
                sigma: sigma_used,
                metrics,
                wall_s,
                error: None,
                series,
            },
            Err(e) => {
                log::error!("cell {} failed: {e}", cell_key(cell, sigma_used));
                RunRecord {
                    cell: *cell,
                    sigma: sigma_used,
                    metrics: PairMetrics::nan(),
                    wall_s,
                    error: Some(e.to_string()),
                    series: None,
                }
            }
        }
    }

    fn trunk_for(&self, cell: &Cell) -> Result<Trunk> {
        let states = BTreeSet::from([cell.t_step]);
        let params_only = if self.plan.metrics.series {
            self.series_steps(cell.t_step).into_iter().collect()
        } else {
            BTreeSet::new()
        };
        self.trunk(cell.seed, &states, &params_only)
    }

    /// Trains to the cell's step, perturbs one copy and trains both copies to
    /// the end with identical batch order and augmentation.
    pub fn spawn_and_perturb(&self, cell: &Cell) -> Result<RunRecord> {
        if cell.mode != Mode::Butterfly {
            return Err(LabError::Config("spawn_and_perturb needs a butterfly cell".into()));
        }
        let trunk = self.trunk_for(cell)?;
        Ok(self.run_cell_from(cell, &trunk, None))
    }

    /// Trains to the cell's step, then trains two exact copies with
    /// independent batch order and augmentation.
    pub fn spawn_independent_noise(&self, cell: &Cell) -> Result<RunRecord> {
        if cell.mode != Mode::Spawning {
            return Err(LabError::Config("spawn_independent_noise needs a spawning cell".into()));
        }
        let trunk = self.trunk_for(cell)?;
        Ok(self.run_cell_from(cell, &trunk, None))
    }

    /// Divergence between the two children at every step in `steps` (which
    /// must lie in `[t, T]`).
    pub fn capture_series(&self, cell: &Cell, steps: &[usize]) -> Result<DivergenceSeries> {
        let total = self.plan.train.total_steps;
        if let Some(s) = steps.iter().find(|&&s| s < cell.t_step || s > total) {
            return Err(LabError::Config(format!(
                "series step {s} outside [{}, {total}]",
                cell.t_step
            )));
        }
        let keep: BTreeSet<usize> = steps.iter().copied().collect();
        let trunk = self.trunk(cell.seed, &BTreeSet::from([cell.t_step]), &BTreeSet::new())?;
        let (theta, opt) = trunk.state_at(cell.t_step)?;
        let sigma = self.resolve_sigma(cell, &theta)?;
        let (_, first) = self.train_first(cell, theta.clone(), &opt, &keep)?;
        let start = self.second_start(cell, sigma, &theta)?;
        let (_, series) = self.train_second(cell, start, &opt, &first)?;
        Ok(series.unwrap_or_default())
    }

    /// All enabled pair metrics between two trained networks.
    pub fn measure(&self, a: &ParamSet<f64>, b: &ParamSet<f64>, seed: u64) -> Result<PairMetrics> {
        let t = &self.plan.metrics;
        let seeds = self.seeds(seed);
        let bset = self.barrier_set();
        let mut m = PairMetrics::nan();
        m.l2 = l2(a, b)?;
        m.ce_a = loss_ce(a, &self.train)?;
        m.ce_b = loss_ce(b, &self.train)?;
        m.acc_a = accuracy(a, &self.test)?;
        m.acc_b = accuracy(b, &self.test)?;
        if t.barrier {
            m.barrier_ce_train = barrier(a, b, BarrierLoss::CrossEntropy, bset, self.plan.n_alphas)?.barrier;
            m.barrier_err_test = barrier(a, b, BarrierLoss::Error01, &self.test, self.plan.n_alphas)?.barrier;
        }
        if t.barrier_wm {
            let out = weight_match(a, b, self.plan.match_passes, &seeds)?;
            let b_al = permute(b, &out.perm)?;
            m.barrier_wm = barrier(a, &b_al, BarrierLoss::CrossEntropy, bset, self.plan.n_alphas)?.barrier;
            m.fixed_frac_wm = fixed_fraction(&out.perm);
        }
        if t.barrier_am {
            let m_probe = self.plan.probe.min(self.train.len());
            let idx = probe_indices(self.train.len(), m_probe, &seeds.fork(2))?;
            let (x, _) = self.train.gather(&idx);
            let (_, ta) = forward(a, x.view())?;
            let (_, tb) = forward(b, x.view())?;
            let p = activation_match(&ta, &tb)?;
            let b_al = permute(b, &p)?;
            m.barrier_am = barrier(a, &b_al, BarrierLoss::CrossEntropy, bset, self.plan.n_alphas)?.barrier;
        }
        if t.cka {
            let m_probe = self.plan.probe.min(self.test.len());
            let (ra, rb) = probe_representations(a, b, &self.test, m_probe, &seeds)?;
            m.cka_angle = match angular_cka(&ra, &rb) {
                Ok(v) => v,
                Err(LabError::Degenerate(msg)) => {
                    log::warn!("CKA undefined: {msg}");
                    f64::NAN
                }
                Err(e) => return Err(e),
            };
        }
        if t.ensemble {
            m.ensemble_acc = ensemble_eval(a, b, &self.test)?;
        }
        Ok(m)
    }

    /// Runs `cells` with one trunk per seed shared by all cells of that seed.
    /// Records come back in the order of `cells`. `on_record` is called as
    /// each cell finishes.
    pub fn run_cells(
        &self,
        cells: &[Cell],
        parallelism: usize,
        on_record: &(dyn Fn(&RunRecord) + Sync),
    ) -> Result<Vec<RunRecord>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .build()
            .map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
        let series_on = self.plan.metrics.series;
        let mut need: BTreeMap<u64, (BTreeSet<usize>, BTreeSet<usize>)> = BTreeMap::new();
        for c in cells {
            let entry = need.entry(c.seed).or_default();
            entry.0.insert(c.t_step);
            if series_on {
                entry.1.extend(self.series_steps(c.t_step));
            }
        }
        let trunks: HashMap<u64, Result<Trunk>> = pool.install(|| {
            need.par_iter()
                .map(|(&seed, (states, params_only))| {
                    let params_only: BTreeSet<usize> = params_only.difference(states).copied().collect();
                    log::info!("seed {seed}: training trunk");
                    (seed, self.trunk(seed, states, &params_only))
                })
                .collect()
        });
        let records = pool.install(|| {
            cells
                .par_iter()
                .map(|cell| {
                    let rec = match &trunks[&cell.seed] {
                        Ok(trunk) => self.run_cell_from(cell, trunk, None),
                        Err(e) => RunRecord {
                            cell: *cell,
                            sigma: match cell.sigma {
                                SigmaSpec::Value(v) if cell.mode == Mode::Butterfly => v,
                                SigmaSpec::Value(_) => 0.0,
                                SigmaSpec::SgdMatched => f64::NAN,
                            },
                            metrics: PairMetrics::nan(),
                            wall_s: 0.0,
                            error: Some(format!("trunk failed: {e}")),
                            series: None,
                        },
                    };
                    on_record(&rec);
                    rec
                })
                .collect()
        });
        Ok(records)
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub out: PathBuf,
    pub parallelism: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SweepSummary {
    pub ran: usize,
    pub skipped: usize,
    pub failed: usize,
    pub records: Vec<RunRecord>,
}

/// Lines of the CSV preamble, each starting with `#`.
pub fn preamble(plan: &ExperimentPlan) -> String {
    let mut s = format!("# trajlab {}\n# plan:\n", env!("CARGO_PKG_VERSION"));
    for line in plan.to_text().lines() {
        s.push_str("#   ");
        s.push_str(line);
        s.push('\n');
    }
    s
}

/// Plan lines in a preamble that must agree for a resume: everything except
/// the grid keys, which may grow.
fn fixed_plan_lines(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| l.strip_prefix("#   "))
        .filter(|l| {
            let key = l.split('=').next().unwrap_or("").trim();
            !crate::plan::GRID_KEYS.contains(&key)
        })
        .map(str::to_string)
        .collect()
}

fn series_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map_or("sweep".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_series.csv"))
}

/// Runs every cell of `plan` not already present in `opts.out`, appending
/// rows as cells finish, then rewrites the file in plan order.
pub fn run_sweep(plan: &ExperimentPlan, opts: &SweepOptions) -> Result<SweepSummary> {
    let lab = Lab::new(plan.clone())?;
    let out = &opts.out;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let pre = preamble(plan);
    let header = CSV_HEADER.join(",");

    let mut done: HashMap<String, String> = HashMap::new();
    if out.exists() {
        let text = fs::read_to_string(out).map_err(|e| LabError::io(out, e))?;
        if fixed_plan_lines(&text) != fixed_plan_lines(&pre) {
            return Err(LabError::Config(format!(
                "{} was written by a different configuration; choose another output",
                out.display()
            )));
        }
        for line in text
            .lines()
            .filter(|l| !l.starts_with('#') && *l != header && !l.is_empty())
        {
            match row_key(line) {
                Some(k) => {
                    done.insert(k, line.to_string());
                }
                None => log::info!("retrying failed row: {line}"),
            }
        }
    }

    let cells = plan.cells();
    let mut todo = Vec::new();
    let mut skipped = 0;
    for c in &cells {
        let known = match (c.mode, c.sigma) {
            (Mode::Spawning, _) => Some(0.0),
            (Mode::Butterfly, SigmaSpec::Value(v)) => Some(v),
            (Mode::Butterfly, SigmaSpec::SgdMatched) => None,
        };
        // Matched sigmas are only known after training to t; such cells are
        // found by matching every other key column.
        let hit = match known {
            Some(s) => done.contains_key(&cell_key(c, s)),
            None => {
                let prefix = cell_key(c, 0.0);
                let prefix = &prefix[..prefix.rfind(',').unwrap()];
                let sigma_plan: Vec<f64> = plan
                    .sigmas
                    .iter()
                    .filter_map(|s| match s {
                        SigmaSpec::Value(v) => Some(*v),
                        SigmaSpec::SgdMatched => None,
                    })
                    .collect();
                done.keys().any(|k| {
                    k.rsplit_once(',')
                        .is_some_and(|(p, s)| p == prefix && s.parse::<f64>().is_ok_and(|v| !sigma_plan.contains(&v)))
                })
            }
        };
        if hit {
            skipped += 1;
        } else {
            todo.push(*c);
        }
    }
    log::info!(
        "{} cells in plan, {} already done, {} to run",
        cells.len(),
        skipped,
        todo.len()
    );

    if !out.exists() {
        fs::write(out, format!("{pre}{header}\n")).map_err(|e| LabError::io(out, e))?;
    }
    let series_file = lab.plan.metrics.series.then(|| series_path(out));
    let open_append = |p: &Path| -> Result<File> {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map_err(|e| LabError::io(p, e))
    };
    let writer = Mutex::new((
        open_append(out)?,
        match &series_file {
            Some(p) => {
                let fresh = !p.exists();
                let mut f = open_append(p)?;
                if fresh {
                    writeln!(f, "mode,seed,t_frac,kind,mask,sigma,step,l2,barrier").map_err(|e| LabError::io(p, e))?;
                }
                Some(f)
            }
            None => None,
        },
    ));
    let on_record = |rec: &RunRecord| {
        let mut w = writer.lock().expect("writer lock");
        if let Err(e) = writeln!(w.0, "{}", rec.to_csv_row()).and_then(|_| w.0.flush()) {
            log::error!("could not append to {}: {e}", out.display());
        }
        if let (Some(f), Some(series)) = (w.1.as_mut(), &rec.series) {
            for p in &series.points {
                let _ = writeln!(f, "{},{},{},{}", rec.key(), p.step, fmt(p.l2), fmt(p.barrier));
            }
            let _ = f.flush();
        }
    };
    let records = lab.run_cells(&todo, opts.parallelism, &on_record)?;
    drop(writer);

    // Rewrite in plan order. Rows are matched to cells by key; rows not in
    // the current plan are kept at the end and old error rows are dropped.
    let mut by_key: HashMap<String, String> = done;
    for r in &records {
        by_key.insert(r.key(), r.to_csv_row());
    }
    let mut ordered_keys: Vec<String> = Vec::new();
    let fresh: HashMap<(u64, usize, String), f64> = records
        .iter()
        .map(|r| ((r.cell.seed, r.cell.t_step, cell_key(&r.cell, 0.0)), r.sigma))
        .collect();
    for c in &cells {
        let candidates: Vec<&String> = by_key
            .keys()
            .filter(|k| {
                let prefix = cell_key(c, 0.0);
                let prefix = &prefix[..prefix.rfind(',').unwrap()];
                k.rsplit_once(',').is_some_and(|(p, _)| p == prefix)
            })
            .collect();
        let want = match (c.mode, c.sigma) {
            (Mode::Spawning, _) => Some(cell_key(c, 0.0)),
            (Mode::Butterfly, SigmaSpec::Value(v)) => Some(cell_key(c, v)),
            (Mode::Butterfly, SigmaSpec::SgdMatched) => fresh
                .get(&(c.seed, c.t_step, cell_key(c, 0.0)))
                .map(|&s| cell_key(c, s))
                .or_else(|| {
                    let plan_sigmas: Vec<String> = plan.sigmas.iter().map(SigmaSpec::label).collect();
                    candidates
                        .iter()
                        .find(|k| !plan_sigmas.iter().any(|s| k.ends_with(&format!(",{s}"))))
                        .map(|k| k.to_string())
                }),
        };
        if let Some(k) = want {
            if by_key.contains_key(&k) && !ordered_keys.contains(&k) {
                ordered_keys.push(k);
            }
        }
    }
    let mut body = String::new();
    for k in &ordered_keys {
        body.push_str(&by_key[k]);
        body.push('\n');
    }
    for r in records.iter().filter(|r| r.error.is_some()) {
        body.push_str(&r.to_csv_row());
        body.push('\n');
    }
    let placed: BTreeSet<&String> = ordered_keys.iter().collect();
    let mut extra: Vec<&String> = by_key.keys().filter(|k| !placed.contains(k)).collect();
    extra.sort();
    for k in extra {
        body.push_str(&by_key[k]);
        body.push('\n');
    }
    let tmp = out.with_extension("csv.tmp");
    fs::write(&tmp, format!("{pre}{header}\n{body}")).map_err(|e| LabError::io(&tmp, e))?;
    fs::rename(&tmp, out).map_err(|e| LabError::io(out, e))?;

    let failed = records.iter().filter(|r| r.error.is_some()).count();
    Ok(SweepSummary {
        ran: records.len(),
        skipped,
        failed,
        records,
    })
}

/// Parses the data rows of a sweep CSV into `(header, rows)`.
pub fn read_sweep_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| LabError::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: "no header row".into(),
        })?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((header, rows))
}
