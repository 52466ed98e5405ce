//! `infonoise` command-line interface.
//!
//! Every subcommand resolves its configuration (defaults, then an optional
//! `--config` file, then flags), writes its artifacts to the output directory
//! and records a `manifest.json` there. `infonoise replay <manifest>` reruns a
//! recorded configuration.

mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use infonoise::allocate::{PivotMethod, Weighting, DEFAULT_POWERLAW_SLOPE_TOL, DEFAULT_POWERLAW_WINDOW};
use infonoise::infer::nfe;
use infonoise::scheduler::SchedulerConfig;
use infonoise::train::{Optimizer, Preconditioning};
use serde::{Deserialize, Serialize};

use crate::commands::Outcome;
use crate::config::{
    absolute, load, DenoiserKind, GridConfig, GridMode, ProfileConfig, SampleConfig, SamplerKind, ScheduleConfig,
    SimulateConfig, ToyConfig, TrainRunConfig,
};
use crate::error::{CliError, CliResult};

/// Environment variable naming the default output directory.
const OUT_DIR_ENV: &str = "INFONOISE_OUT_DIR";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "infonoise", version, about = "Information-aligned noise schedules for diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Oracle MMSE and entropy-rate profile of a dataset.
    Profile(ProfileArgs),
    /// Offline schedule (allocation, sampler, emphasis) from a rate profile.
    Schedule(ScheduleArgs),
    /// Online scheduler driven by stochastic oracle losses.
    Simulate(SimulateArgs),
    /// Train a small MLP denoiser.
    Train(TrainArgs),
    /// Inference sigma grid.
    Grid(GridArgs),
    /// Generate points by Heun integration of the probability-flow ODE.
    Sample(SampleArgs),
    /// Two-point model table.
    Toy(ToyArgs),
    /// Rerun a recorded manifest.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct Common {
    /// TOML or JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $INFONOISE_OUT_DIR or `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_mc: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingKind {
    Unit,
    Edm,
}

#[derive(Clone, Copy, ValueEnum)]
enum PivotKind {
    Onset,
    Powerlaw,
}

/// Flags of the offline pipeline shared by several subcommands.
#[derive(Args)]
struct SpecFlags {
    #[arg(long, value_enum)]
    weighting: Option<WeightingKind>,
    /// Data scale of the `edm` weighting.
    #[arg(long)]
    sigma_data: Option<f64>,
    #[arg(long)]
    n_gate: Option<f64>,
    #[arg(long, value_enum)]
    pivot: Option<PivotKind>,
    /// Threshold of the onset pivot rule.
    #[arg(long)]
    onset_p: Option<f64>,
    #[arg(long)]
    powerlaw_window: Option<usize>,
    #[arg(long)]
    slope_tol: Option<f64>,
    #[arg(long)]
    smoothing: Option<bool>,
}

impl SpecFlags {
    fn weighting(&self, current: Weighting<f64>) -> CliResult<Weighting<f64>> {
        let sd = match (self.sigma_data, current) {
            (Some(sd), _) => sd,
            (None, Weighting::Edm { sigma_data }) => sigma_data,
            (None, Weighting::Unit) => 0.5,
        };
        match (self.weighting, current) {
            (Some(WeightingKind::Unit), _) | (None, Weighting::Unit) if self.sigma_data.is_some() => {
                Err(CliError::Config("--sigma-data requires --weighting edm".into()))
            }
            (Some(WeightingKind::Unit), _) => Ok(Weighting::Unit),
            (Some(WeightingKind::Edm), _) | (None, Weighting::Edm { .. }) => Ok(Weighting::Edm { sigma_data: sd }),
            (None, Weighting::Unit) => Ok(Weighting::Unit),
        }
    }

    fn pivot(&self, current: PivotMethod<f64>) -> CliResult<PivotMethod<f64>> {
        let kind = self.pivot.unwrap_or(match current {
            PivotMethod::Onset { .. } => PivotKind::Onset,
            PivotMethod::Powerlaw { .. } => PivotKind::Powerlaw,
        });
        match kind {
            PivotKind::Onset => {
                if self.powerlaw_window.is_some() || self.slope_tol.is_some() {
                    return Err(CliError::Config("power-law flags require --pivot powerlaw".into()));
                }
                let p = match current {
                    PivotMethod::Onset { p } => p,
                    _ => infonoise::allocate::DEFAULT_ONSET_THRESHOLD,
                };
                Ok(PivotMethod::Onset { p: self.onset_p.unwrap_or(p) })
            }
            PivotKind::Powerlaw => {
                if self.onset_p.is_some() {
                    return Err(CliError::Config("--onset-p requires --pivot onset".into()));
                }
                let (w, t) = match current {
                    PivotMethod::Powerlaw { window, slope_tol } => (window, slope_tol),
                    _ => (DEFAULT_POWERLAW_WINDOW, DEFAULT_POWERLAW_SLOPE_TOL),
                };
                Ok(PivotMethod::Powerlaw {
                    window: self.powerlaw_window.unwrap_or(w),
                    slope_tol: self.slope_tol.unwrap_or(t),
                })
            }
        }
    }
}

#[derive(Args)]
struct ScheduleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    column: Option<String>,
    #[command(flatten)]
    spec: SpecFlags,
}

/// Scheduler flags; they override the `scheduler` section of a config file.
#[derive(Args)]
struct SchedulerFlags {
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_warm: Option<u64>,
    #[arg(long)]
    m: Option<u64>,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    n_min: Option<usize>,
    #[arg(long)]
    ema_seed_first: Option<bool>,
    #[arg(long)]
    clear_buffers: Option<bool>,
    #[command(flatten)]
    spec: SpecFlags,
}

impl SchedulerFlags {
    fn apply(&self, s: &mut SchedulerConfig<f64>) -> CliResult<()> {
        set(&mut s.sigma_min, self.sigma_min);
        set(&mut s.sigma_max, self.sigma_max);
        set(&mut s.k, self.k);
        set(&mut s.n_warm, self.n_warm);
        set(&mut s.m, self.m);
        set(&mut s.b, self.b);
        set(&mut s.beta, self.beta);
        set(&mut s.n_min, self.n_min);
        set(&mut s.ema_seed_first, self.ema_seed_first);
        set(&mut s.clear_buffers, self.clear_buffers);
        set(&mut s.n_gate, self.spec.n_gate);
        set(&mut s.smoothing, self.spec.smoothing);
        s.weighting = self.spec.weighting(s.weighting)?;
        s.pivot = self.spec.pivot(s.pivot)?;
        Ok(())
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reference_n_mc: Option<usize>,
    #[command(flatten)]
    scheduler: SchedulerFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerKind {
    Sgd,
    Momentum,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecondKind {
    None,
    Edm,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    preconditioning: Option<PrecondKind>,
    /// Data scale of the `edm` preconditioning.
    #[arg(long)]
    precond_sigma_data: Option<f64>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerKind>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma_per_batch: Option<bool>,
    #[arg(long)]
    lr_decay: Option<bool>,
    /// Scheduler flags; `--weighting`/`--sigma-data` also set the training
    /// objective's weighting.
    #[command(flatten)]
    scheduler: SchedulerFlags,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    /// Print the function-evaluation count for this many steps and exit.
    #[arg(long, value_name = "STEPS")]
    nfe_check: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<GridMode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    column: Option<String>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    denoiser: Option<DenoiserKind>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ToyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    quad_order: Option<usize>,
}

#[derive(Args)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Output directory (default: the manifest's directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Record of one run, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunManifest {
    subcommand: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    version: String,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: &Option<PathBuf>) -> CliResult<()> {
    if let Some(v) = value {
        *slot = Some(v.clone());
    }
    if let Some(p) = slot.as_mut() {
        *p = absolute(p)?;
    }
    Ok(())
}

fn out_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"))
}

fn resolve_profile(a: &ProfileArgs) -> CliResult<ProfileConfig> {
    let mut c: ProfileConfig = load(a.common.config.as_deref())?;
    set_path(&mut c.dataset, &a.dataset)?;
    set(&mut c.sigma_min, a.sigma_min);
    set(&mut c.sigma_max, a.sigma_max);
    set(&mut c.k, a.k);
    set(&mut c.n_mc, a.n_mc);
    set(&mut c.seed, a.seed);
    Ok(c)
}

fn resolve_schedule(a: &ScheduleArgs) -> CliResult<ScheduleConfig> {
    let mut c: ScheduleConfig = load(a.common.config.as_deref())?;
    set_path(&mut c.profile, &a.profile)?;
    set(&mut c.column, a.column.clone());
    set(&mut c.n_gate, a.spec.n_gate);
    set(&mut c.smoothing, a.spec.smoothing);
    c.weighting = a.spec.weighting(c.weighting)?;
    c.pivot = a.spec.pivot(c.pivot)?;
    Ok(c)
}

fn resolve_simulate(a: &SimulateArgs) -> CliResult<SimulateConfig> {
    let mut c: SimulateConfig = load(a.common.config.as_deref())?;
    set_path(&mut c.dataset, &a.dataset)?;
    set(&mut c.steps, a.steps);
    set(&mut c.seed, a.seed);
    set(&mut c.reference_n_mc, a.reference_n_mc);
    a.scheduler.apply(&mut c.scheduler)?;
    Ok(c)
}

fn resolve_train(a: &TrainArgs) -> CliResult<TrainRunConfig> {
    let mut c: TrainRunConfig = load(a.common.config.as_deref())?;
    set_path(&mut c.dataset, &a.dataset)?;
    set(&mut c.hidden, a.hidden.clone());
    set(&mut c.sampler, a.sampler);
    let sd = a.precond_sigma_data;
    c.preconditioning = match (a.preconditioning, c.preconditioning) {
        (Some(PrecondKind::None), _) | (None, Preconditioning::None) if sd.is_some() => {
            return Err(CliError::Config("--precond-sigma-data requires --preconditioning edm".into()));
        }
        (Some(PrecondKind::None), _) => Preconditioning::None,
        (Some(PrecondKind::Edm), Preconditioning::Edm { sigma_data }) | (None, Preconditioning::Edm { sigma_data }) => {
            Preconditioning::Edm { sigma_data: sd.unwrap_or(sigma_data) }
        }
        (Some(PrecondKind::Edm), Preconditioning::None) => Preconditioning::Edm { sigma_data: sd.unwrap_or(0.5) },
        (None, Preconditioning::None) => Preconditioning::None,
    };
    let t = &mut c.train;
    set(&mut t.lr, a.lr);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.steps, a.steps);
    set(&mut t.seed, a.seed);
    set(&mut t.sigma_per_batch, a.sigma_per_batch);
    set(&mut t.lr_decay, a.lr_decay);
    let mu = match t.optimizer {
        Optimizer::Momentum { momentum } => momentum,
        Optimizer::Sgd => 0.9,
    };
    t.optimizer = match (a.optimizer, t.optimizer) {
        (Some(OptimizerKind::Sgd), _) if a.momentum.is_some() => {
            return Err(CliError::Config("--momentum requires --optimizer momentum".into()));
        }
        (Some(OptimizerKind::Sgd), _) => Optimizer::Sgd,
        (None, Optimizer::Sgd) if a.momentum.is_none() => Optimizer::Sgd,
        _ => Optimizer::Momentum { momentum: a.momentum.unwrap_or(mu) },
    };
    let had_weighting_flag = a.scheduler.spec.weighting.is_some() || a.scheduler.spec.sigma_data.is_some();
    a.scheduler.apply(&mut c.scheduler)?;
    if had_weighting_flag {
        c.train.weighting = c.scheduler.weighting;
    }
    Ok(c)
}

fn resolve_grid(a: &GridArgs) -> CliResult<GridConfig> {
    let mut c: GridConfig = load(a.common.config.as_deref())?;
    set(&mut c.mode, a.mode);
    set(&mut c.steps, a.steps);
    set_path(&mut c.profile, &a.profile)?;
    set(&mut c.column, a.column.clone());
    set(&mut c.sigma_min, a.sigma_min);
    set(&mut c.sigma_max, a.sigma_max);
    set(&mut c.rho, a.rho);
    Ok(c)
}

fn resolve_sample(a: &SampleArgs) -> CliResult<SampleConfig> {
    let mut c: SampleConfig = load(a.common.config.as_deref())?;
    set(&mut c.denoiser, a.denoiser);
    set_path(&mut c.dataset, &a.dataset)?;
    set_path(&mut c.checkpoint, &a.checkpoint)?;
    set_path(&mut c.grid, &a.grid)?;
    set(&mut c.steps, a.steps);
    set(&mut c.sigma_min, a.sigma_min);
    set(&mut c.sigma_max, a.sigma_max);
    set(&mut c.rho, a.rho);
    set(&mut c.n, a.n);
    set(&mut c.seed, a.seed);
    Ok(c)
}

fn resolve_toy(a: &ToyArgs) -> CliResult<ToyConfig> {
    let mut c: ToyConfig = load(a.common.config.as_deref())?;
    set(&mut c.a, a.a);
    set(&mut c.sigma_min, a.sigma_min);
    set(&mut c.sigma_max, a.sigma_max);
    set(&mut c.k, a.k);
    set(&mut c.quad_order, a.quad_order);
    Ok(c)
}

/// Runs `body` and writes the manifest into `out`.
fn record<C: Serialize>(
    name: &str,
    cfg: &C,
    seed: Option<u64>,
    out: &Path,
    body: impl FnOnce(&C, &Path) -> CliResult<Outcome>,
) -> CliResult<()> {
    std::fs::create_dir_all(out)?;
    let outcome = body(cfg, out)?;
    let manifest = RunManifest {
        subcommand: name.into(),
        config: serde_json::to_value(cfg).map_err(infonoise::Error::from)?,
        seed,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
        version: concat!("infonoise ", env!("CARGO_PKG_VERSION")).into(),
    };
    infonoise::io::write_json(infonoise::io::create(&out.join(MANIFEST_FILE))?, &manifest)?;
    for path in &manifest.outputs {
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Dispatches a resolved configuration by subcommand name.
fn execute(name: &str, config: serde_json::Value, out: &Path) -> CliResult<()> {
    fn parse<C: serde::de::DeserializeOwned>(v: serde_json::Value) -> CliResult<C> {
        serde_json::from_value(v).map_err(|e| CliError::Config(format!("manifest config: {e}")))
    }
    match name {
        "profile" => {
            let c: ProfileConfig = parse(config)?;
            record(name, &c, Some(c.seed), out, commands::profile)
        }
        "schedule" => record(name, &parse::<ScheduleConfig>(config)?, None, out, commands::schedule),
        "simulate" => {
            let c: SimulateConfig = parse(config)?;
            record(name, &c, Some(c.seed), out, commands::simulate)
        }
        "train" => {
            let c: TrainRunConfig = parse(config)?;
            record(name, &c, Some(c.train.seed), out, commands::train)
        }
        "grid" => record(name, &parse::<GridConfig>(config)?, None, out, commands::grid),
        "sample" => {
            let c: SampleConfig = parse(config)?;
            record(name, &c, Some(c.seed), out, commands::sample)
        }
        "toy" => record(name, &parse::<ToyConfig>(config)?, None, out, commands::toy),
        other => Err(CliError::Config(format!("unknown subcommand in manifest: {other}"))),
    }
}

fn to_value<C: Serialize>(c: &C) -> CliResult<serde_json::Value> {
    Ok(serde_json::to_value(c).map_err(infonoise::Error::from)?)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Profile(a) => execute("profile", to_value(&resolve_profile(&a)?)?, &out_dir(&a.common.out)),
        Command::Schedule(a) => execute("schedule", to_value(&resolve_schedule(&a)?)?, &out_dir(&a.common.out)),
        Command::Simulate(a) => execute("simulate", to_value(&resolve_simulate(&a)?)?, &out_dir(&a.common.out)),
        Command::Train(a) => execute("train", to_value(&resolve_train(&a)?)?, &out_dir(&a.common.out)),
        Command::Grid(a) => {
            if let Some(steps) = a.nfe_check {
                if steps == 0 {
                    return Err(CliError::Config("--nfe-check needs at least 1 step".into()));
                }
                println!("NFE {}", nfe(steps));
                return Ok(());
            }
            execute("grid", to_value(&resolve_grid(&a)?)?, &out_dir(&a.common.out))
        }
        Command::Sample(a) => execute("sample", to_value(&resolve_sample(&a)?)?, &out_dir(&a.common.out)),
        Command::Toy(a) => execute("toy", to_value(&resolve_toy(&a)?)?, &out_dir(&a.common.out)),
        Command::Replay(a) => {
            let file = infonoise::io::open(&a.manifest)?;
            let manifest: RunManifest = infonoise::io::read_json(file)?;
            let out = match a.out {
                Some(dir) => dir,
                None => a.manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            execute(&manifest.subcommand, manifest.config, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
