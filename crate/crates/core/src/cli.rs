//! Command-line interface.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Args, FromArgMatches, Parser, Subcommand};

use crate::align::{activation_match, fixed_fraction, permute, weight_match};
use crate::checkpoint::Checkpoint;
use crate::dataset::{write_idx, Dataset};
use crate::divergence::{barrier, fit_exponential, BarrierLoss};
use crate::error::LabError;
use crate::experiment::{preamble, read_sweep_csv, run_sweep, Lab, SweepOptions, CSV_HEADER};
use crate::nn::{accuracy, forward, loss_ce, ParamSet};
use crate::plan::{canonical_pair, parse_pairs, DataSource, ExperimentPlan, GRID_KEYS, KEY_ALIASES, PLAN_KEYS};
use crate::repsim::{angular_cka_report, probe_representations};
use crate::rng::SeedPlan;
use crate::train::train_from_scratch;

/// Every plan key as a `--flag`. Grid keys may be repeated.
#[derive(Debug, Clone, Default)]
pub struct PlanArgs {
    pub pairs: Vec<(String, String)>,
}

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

impl Args for PlanArgs {
    fn augment_args(cmd: clap::Command) -> clap::Command {
        PLAN_KEYS
            .iter()
            .fold(cmd, |cmd, &key| {
                let arg = Arg::new(key)
                    .long(flag(key))
                    .value_name("VALUE")
                    .help_heading("Plan keys");
                let arg = KEY_ALIASES
                    .iter()
                    .filter(|(_, k)| *k == key)
                    .fold(arg, |arg, (alias, _)| arg.visible_alias(flag(alias)));
                let arg = if GRID_KEYS.contains(&key) {
                    arg.action(ArgAction::Append)
                } else {
                    arg.action(ArgAction::Set)
                };
                cmd.arg(arg)
            })
            .arg(
                Arg::new("fraction")
                    .long("fraction")
                    .value_name("F")
                    .help("Shorthand for --masks fraction:F")
                    .help_heading("Plan keys")
                    .action(ArgAction::Append),
            )
    }

    fn augment_args_for_update(cmd: clap::Command) -> clap::Command {
        Self::augment_args(cmd)
    }
}

impl FromArgMatches for PlanArgs {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut pairs = Vec::new();
        for &key in PLAN_KEYS.iter().chain(&["fraction"]) {
            if let Some(vals) = m.get_many::<String>(key) {
                for v in vals {
                    pairs.push(canonical_pair(key, v));
                }
            }
        }
        Ok(PlanArgs { pairs })
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "trajlab", version, about = "Training-trajectory divergence experiments")]
pub struct Cli {
    /// Directory for outputs given as relative paths.
    #[arg(long, global = true, env = "TRAJLAB_OUT", default_value = ".")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic mixture as IDX files.
    GenData {
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Train one network from scratch and save a checkpoint.
    Train {
        /// Plan file; flags override its keys.
        #[arg(long = "plan", value_name = "FILE")]
        plan_file: Option<PathBuf>,
        #[command(flatten)]
        plan: PlanArgs,
        /// Checkpoint path.
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
    },
    /// Run the first cell of a plan and print its CSV row.
    SpawnPerturb {
        /// Plan file; flags override its keys.
        #[arg(long = "plan", value_name = "FILE")]
        plan_file: Option<PathBuf>,
        #[command(flatten)]
        plan: PlanArgs,
        /// Also write the divergence series to this file.
        #[arg(long)]
        series_out: Option<PathBuf>,
    },
    /// Run every cell of a plan, resuming an existing output.
    Sweep {
        /// Plan file; flags override its keys.
        #[arg(long = "plan", value_name = "FILE")]
        plan_file: Option<PathBuf>,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
        /// Worker threads.
        #[arg(long = "parallel", visible_alias = "parallelism", default_value_t = 1)]
        parallelism: usize,
    },
    /// Loss barrier between two checkpoints.
    Barrier {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// `ce` (cross-entropy) or `err` (0-1 error).
        #[arg(long, default_value = "ce")]
        loss: String,
        /// Split to evaluate on: `train` or `test`.
        #[arg(long, default_value = "train")]
        data: String,
        #[arg(long, default_value_t = 11)]
        n_alphas: usize,
        /// Write the interpolation curve here.
        #[arg(long)]
        curve_out: Option<PathBuf>,
    },
    /// Permute the hidden units of `b` to match `a`.
    Align {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// `weight` or `activation`.
        #[arg(long, default_value = "weight")]
        method: String,
        #[arg(long, default_value_t = 100)]
        max_passes: usize,
        #[arg(long, default_value_t = 1000)]
        probe: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the permutation as JSON.
        #[arg(long)]
        perm_out: Option<PathBuf>,
        /// Write the permuted `b` as a checkpoint.
        #[arg(long)]
        aligned_out: Option<PathBuf>,
    },
    /// Angular CKA between the last hidden layers of two checkpoints.
    Cka {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 1000)]
        probe: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exponential fit to a divergence series.
    Fit {
        /// CSV with `step` and the chosen field as columns.
        series: PathBuf,
        /// `l2` or `barrier`.
        #[arg(long, default_value = "l2")]
        field: String,
    },
    /// Mean and spread of sweep metrics grouped over seeds.
    Report {
        sweep: PathBuf,
        /// Metric columns to summarize.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "l2,barrier_ce_train,barrier_err_test,cka_angle"
        )]
        metrics: Vec<String>,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(LabError),
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Config(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn resolve(out_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out_dir.join(p)
    }
}

fn build_plan(file: Option<&Path>, args: &PlanArgs) -> CliResult<ExperimentPlan> {
    let mut pairs = match file {
        Some(f) => {
            let text = fs::read_to_string(f).map_err(|e| CliError::Runtime(LabError::io(f, e)))?;
            parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    // Grid keys on the command line replace those from the file.
    let cli_grid: Vec<&str> = args
        .pairs
        .iter()
        .map(|(k, _)| k.as_str())
        .filter(|k| GRID_KEYS.contains(k))
        .collect();
    pairs.retain(|(k, _)| !cli_grid.contains(&k.as_str()));
    pairs.extend(args.pairs.iter().cloned());
    Ok(ExperimentPlan::from_pairs(&pairs)?)
}

fn announce(plan: &ExperimentPlan) {
    eprint!("{}", preamble(plan));
}

fn load_ckpt(p: &Path) -> CliResult<Checkpoint<f64>> {
    Checkpoint::load(p).map_err(CliError::Runtime)
}

fn ckpt_data(a: &Checkpoint<f64>) -> CliResult<(Dataset<f64>, Dataset<f64>)> {
    let src = a
        .header
        .data
        .clone()
        .ok_or_else(|| CliError::Usage("checkpoint does not record its data source".into()))?;
    src.load().map_err(CliError::Runtime)
}

fn same_net(a: &Checkpoint<f64>, b: &Checkpoint<f64>) -> CliResult {
    if a.header.net != b.header.net {
        return Err(CliError::Usage("checkpoints have different architectures".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let out_dir = cli.out_dir;
    let stdout = std::io::stdout();
    let mut so = stdout.lock();
    let io_err = |e: std::io::Error| CliError::Runtime(LabError::io("<stdout>", e));
    match cli.command {
        Command::GenData { plan } => {
            let plan = build_plan(None, &plan)?;
            announce(&plan);
            let DataSource::Mixture(_) = &plan.data else {
                return Err(CliError::Usage("gen-data writes the synthetic mixture only".into()));
            };
            let (train, test) = plan.data.load()?;
            fs::create_dir_all(&out_dir).map_err(|e| CliError::Runtime(LabError::io(&out_dir, e)))?;
            for (d, name) in [(&train, "train"), (&test, "test")] {
                let img = out_dir.join(format!("{name}-images.idx"));
                let lab = out_dir.join(format!("{name}-labels.idx"));
                write_idx(d, &img, &lab).map_err(CliError::Runtime)?;
                writeln!(so, "{}\n{}", img.display(), lab.display()).map_err(io_err)?;
            }
        }
        Command::Train { plan_file, plan, out } => {
            let plan = build_plan(plan_file.as_deref(), &plan)?;
            announce(&plan);
            let lab = Lab::new(plan)?;
            let seed = lab.plan.seeds[0];
            let (params, opt) = train_from_scratch(&lab.spec, &lab.train, &lab.plan.train, &SeedPlan::new(seed))
                .map_err(CliError::Runtime)?;
            let ce = loss_ce(&params, &lab.train).map_err(CliError::Runtime)?;
            let acc = accuracy(&params, &lab.test).map_err(CliError::Runtime)?;
            let path = resolve(&out_dir, &out);
            Checkpoint::new(params, opt, lab.plan.train.clone(), seed, Some(lab.plan.data.clone()))
                .save(&path)
                .map_err(CliError::Runtime)?;
            writeln!(so, "checkpoint,train_ce,test_acc\n{},{ce},{acc}", path.display()).map_err(io_err)?;
        }
        Command::SpawnPerturb {
            plan_file,
            plan,
            series_out,
        } => {
            let plan = build_plan(plan_file.as_deref(), &plan)?;
            announce(&plan);
            let lab = Lab::new(plan)?;
            let cell = lab.plan.cells()[0];
            let rec = match cell.mode {
                crate::plan::Mode::Butterfly => lab.spawn_and_perturb(&cell),
                crate::plan::Mode::Spawning => lab.spawn_independent_noise(&cell),
            }
            .map_err(CliError::Runtime)?;
            if let Some(e) = &rec.error {
                return Err(CliError::Runtime(LabError::Degenerate(e.clone())));
            }
            writeln!(so, "{}\n{}", CSV_HEADER.join(","), rec.to_csv_row()).map_err(io_err)?;
            if let (Some(p), Some(s)) = (series_out, &rec.series) {
                let p = resolve(&out_dir, &p);
                fs::write(&p, s.to_csv()).map_err(|e| CliError::Runtime(LabError::io(&p, e)))?;
            }
        }
        Command::Sweep {
            plan_file,
            plan,
            out,
            parallelism,
        } => {
            let plan = build_plan(plan_file.as_deref(), &plan)?;
            announce(&plan);
            let opts = SweepOptions {
                out: resolve(&out_dir, &out),
                parallelism,
            };
            let s = run_sweep(&plan, &opts)?;
            writeln!(
                so,
                "{}: ran {}, skipped {}, failed {}",
                opts.out.display(),
                s.ran,
                s.skipped,
                s.failed
            )
            .map_err(io_err)?;
        }
        Command::Barrier {
            a,
            b,
            loss,
            data,
            n_alphas,
            curve_out,
        } => {
            let (ca, cb) = (load_ckpt(&a)?, load_ckpt(&b)?);
            same_net(&ca, &cb)?;
            let (train, test) = ckpt_data(&ca)?;
            let kind = match loss.as_str() {
                "ce" => BarrierLoss::CrossEntropy,
                "err" => BarrierLoss::Error01,
                _ => return Err(CliError::Usage(format!("unknown loss {loss:?}; use ce or err"))),
            };
            let split = match data.as_str() {
                "train" => &train,
                "test" => &test,
                _ => return Err(CliError::Usage(format!("unknown split {data:?}; use train or test"))),
            };
            let r = barrier(&ca.params, &cb.params, kind, split, n_alphas)?;
            writeln!(so, "barrier,argmax_alpha\n{:?},{:?}", r.barrier, r.argmax_alpha).map_err(io_err)?;
            if let Some(p) = curve_out {
                let p = resolve(&out_dir, &p);
                fs::write(&p, r.to_csv()).map_err(|e| CliError::Runtime(LabError::io(&p, e)))?;
            }
        }
        Command::Align {
            a,
            b,
            method,
            max_passes,
            probe,
            seed,
            perm_out,
            aligned_out,
        } => {
            let (ca, cb) = (load_ckpt(&a)?, load_ckpt(&b)?);
            same_net(&ca, &cb)?;
            let (train, _) = ckpt_data(&ca)?;
            let seeds = SeedPlan::new(seed);
            let perm = match method.as_str() {
                "weight" => weight_match(&ca.params, &cb.params, max_passes, &seeds)?.perm,
                "activation" => {
                    let idx = crate::repsim::probe_indices(train.len(), probe.min(train.len()), &seeds)?;
                    let (x, _) = train.gather(&idx);
                    let (_, ta) = forward(&ca.params, x.view())?;
                    let (_, tb) = forward(&cb.params, x.view())?;
                    activation_match(&ta, &tb)?
                }
                _ => {
                    return Err(CliError::Usage(format!(
                        "unknown method {method:?}; use weight or activation"
                    )))
                }
            };
            let aligned: ParamSet<f64> = permute(&cb.params, &perm)?;
            let before = barrier(&ca.params, &cb.params, BarrierLoss::CrossEntropy, &train, 11)?.barrier;
            let after = barrier(&ca.params, &aligned, BarrierLoss::CrossEntropy, &train, 11)?.barrier;
            writeln!(
                so,
                "barrier_before,barrier_after,fixed_frac\n{before},{after},{}",
                fixed_fraction(&perm)
            )
            .map_err(io_err)?;
            if let Some(p) = perm_out {
                let p = resolve(&out_dir, &p);
                fs::write(&p, perm.to_json()).map_err(|e| CliError::Runtime(LabError::io(&p, e)))?;
            }
            if let Some(p) = aligned_out {
                let p = resolve(&out_dir, &p);
                let mut ck = cb.clone();
                ck.params = aligned;
                ck.save(&p).map_err(CliError::Runtime)?;
            }
        }
        Command::Cka { a, b, probe, seed } => {
            let (ca, cb) = (load_ckpt(&a)?, load_ckpt(&b)?);
            let (_, test) = ckpt_data(&ca)?;
            let m = probe.min(test.len());
            let (ra, rb) = probe_representations(&ca.params, &cb.params, &test, m, &SeedPlan::new(seed))?;
            let r = angular_cka_report(&ra, &rb).map_err(CliError::Runtime)?;
            writeln!(
                so,
                "angle,hsic_xy,hsic_xx,hsic_yy\n{},{},{},{}",
                r.angle, r.hsic_xy, r.hsic_xx, r.hsic_yy
            )
            .map_err(io_err)?;
        }
        Command::Fit { series, field } => {
            let (header, rows) = read_sweep_csv(&series)?;
            let col = |name: &str| header.iter().position(|h| h == name);
            let (Some(si), Some(fi)) = (col("step"), col(&field)) else {
                return Err(CliError::Usage(format!(
                    "{} needs step and {field} columns",
                    series.display()
                )));
            };
            // Rows are grouped by every column before `step`.
            let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for r in &rows {
                let key = r[..si].join(",");
                let parse = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
                groups.entry(key).or_default().push((parse(&r[si]), parse(&r[fi])));
            }
            let prefix = header[..si].join(",");
            let sep = if prefix.is_empty() { "" } else { "," };
            writeln!(so, "{prefix}{sep}rate,intercept,r2,n_used").map_err(io_err)?;
            for (key, pts) in groups {
                let sep = if key.is_empty() { "" } else { "," };
                match fit_exponential(&pts) {
                    Ok(f) => writeln!(so, "{key}{sep}{},{},{},{}", f.rate, f.intercept, f.r2, f.n_used),
                    Err(e) => {
                        log::warn!("{key}: {e}");
                        writeln!(so, "{key}{sep}nan,nan,nan,{}", pts.len())
                    }
                }
                .map_err(io_err)?;
            }
        }
        Command::Report { sweep, metrics } => {
            let (header, rows) = read_sweep_csv(&sweep)?;
            let col = |name: &str| {
                header
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| CliError::Usage(format!("no column {name:?} in {}", sweep.display())))
            };
            let keys = ["mode", "t_frac", "kind", "mask", "sigma"].map(col);
            let keys: Vec<usize> = keys.into_iter().collect::<CliResult<_>>()?;
            let mcols: Vec<usize> = metrics.iter().map(|m| col(m)).collect::<CliResult<_>>()?;
            let mut groups: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
            for r in &rows {
                let key = keys.iter().map(|&i| r[i].as_str()).collect::<Vec<_>>().join(",");
                let vals: Vec<f64> = mcols.iter().map(|&i| r[i].parse().unwrap_or(f64::NAN)).collect();
                match groups.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, v)) => v.push(vals),
                    None => groups.push((key, vec![vals])),
                }
            }
            let mut head = vec!["mode,t_frac,kind,mask,sigma,n".to_string()];
            for m in &metrics {
                head.push(format!("{m}_mean,{m}_std"));
            }
            writeln!(so, "{}", head.join(",")).map_err(io_err)?;
            for (key, vals) in groups {
                let mut line = format!("{key},{}", vals.len());
                for j in 0..mcols.len() {
                    let xs: Vec<f64> = vals.iter().map(|v| v[j]).filter(|x| x.is_finite()).collect();
                    let n = xs.len() as f64;
                    let mean = xs.iter().sum::<f64>() / n;
                    let std = if xs.len() > 1 {
                        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                    } else {
                        0.0
                    };
                    line.push_str(&format!(",{mean},{std}"));
                }
                writeln!(so, "{line}").map_err(io_err)?;
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 1 for usage errors, 2 for runtime failures.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `trajlab --help` for usage.");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
