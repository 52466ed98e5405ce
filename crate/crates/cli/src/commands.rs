//! Subcommand bodies. Each takes a fully resolved config and an output
//! directory and reports the files it read and wrote.

use std::path::{Path, PathBuf};

use infonoise::allocate::build_schedule;
use infonoise::grid::{LogGrid, Profile, SigmaRange, TabulatedDensity};
use infonoise::infer::{heun_sample_many, infogrid, reference_grid, InferenceGrid};
use infonoise::io;
use infonoise::oracle::{entropy_rate_profile, mmse_profile, Dataset};
use infonoise::rng::{fill_normal, substream, Stream};
use infonoise::scheduler::{simulate_oracle, FixedSampler, Scheduler, SchedulerConfig};
use infonoise::toy::{toy_mmse_profile, toy_table, TwoPointModel};
use infonoise::train::{train_loop, Checkpoint, MlpDenoiser};

use crate::config::{
    require, DenoiserKind, GridConfig, GridMode, ProfileConfig, SampleConfig, SamplerKind, ScheduleConfig,
    SimulateConfig, ToyConfig, TrainRunConfig,
};
use crate::error::{CliError, CliResult};

/// Quadrature order of the two-point reference profile.
const REFERENCE_QUAD_ORDER: usize = 256;

#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

pub fn profile(cfg: &ProfileConfig, out: &Path) -> CliResult<Outcome> {
    let path = require(&cfg.dataset, "dataset")?;
    let data = io::read_dataset_file(&path)?;
    let grid = LogGrid::new(SigmaRange::new(cfg.sigma_min, cfg.sigma_max)?, cfg.k)?;
    let mmse = mmse_profile(&data, &grid, cfg.n_mc, cfg.seed)?;
    let rate = entropy_rate_profile(&mmse);
    let file = out.join("profile.csv");
    io::write_profiles_csv(io::create(&file)?, &[("mmse", &mmse), ("entropy_rate", &rate)])?;
    Ok(Outcome { inputs: vec![path], outputs: vec![file] })
}

pub fn schedule(cfg: &ScheduleConfig, out: &Path) -> CliResult<Outcome> {
    let path = require(&cfg.profile, "profile")?;
    let rate = io::read_profile_file(&path, &cfg.column)?;
    let spec = cfg.spec();
    let sched = build_schedule(&rate, &spec)?;
    let file = out.join("schedule.json");
    io::write_json(io::create(&file)?, &io::ScheduleFile::new(&sched, &spec))?;
    Ok(Outcome { inputs: vec![path], outputs: vec![file] })
}

/// Offline sampling density for the scheduler's grid and settings: exact
/// quadrature for a symmetric two-point dataset, Monte Carlo otherwise.
pub fn reference_density(
    data: &Dataset<f64>,
    sched: &SchedulerConfig<f64>,
    n_mc: usize,
    seed: u64,
) -> CliResult<TabulatedDensity<f64>> {
    let grid = sched.grid()?;
    let mmse: Profile<f64> = match TwoPointModel::from_dataset(data) {
        Some(model) => toy_mmse_profile(&model, &grid, REFERENCE_QUAD_ORDER)?,
        None => mmse_profile(data, &grid, n_mc, seed)?,
    };
    Ok(build_schedule(&entropy_rate_profile(&mmse), &sched.schedule_spec())?.pi)
}

pub fn simulate(cfg: &SimulateConfig, out: &Path) -> CliResult<Outcome> {
    let path = require(&cfg.dataset, "dataset")?;
    let data = io::read_dataset_file(&path)?;
    cfg.scheduler.validate()?;
    let reference = reference_density(&data, &cfg.scheduler, cfg.reference_n_mc, cfg.seed)?;
    let log = simulate_oracle(&data, cfg.scheduler.clone(), cfg.steps, cfg.seed, Some(&reference))?;
    let file = out.join("refresh_log.jsonl");
    io::write_jsonl(io::create(&file)?, &log)?;
    Ok(Outcome { inputs: vec![path], outputs: vec![file] })
}

pub fn train(cfg: &TrainRunConfig, out: &Path) -> CliResult<Outcome> {
    let path = require(&cfg.dataset, "dataset")?;
    if cfg.sampler == SamplerKind::Adaptive && cfg.scheduler.weighting != cfg.train.weighting {
        return Err(CliError::Config(
            "scheduler.weighting and train.weighting must agree for adaptive sampling".into(),
        ));
    }
    let data = io::read_dataset_file(&path)?;
    let mut init_rng = substream(cfg.train.seed, Stream::Data);
    let mut mlp = MlpDenoiser::new(data.dim(), &cfg.hidden, cfg.preconditioning, false, &mut init_rng)?;
    let outcome = match cfg.sampler {
        SamplerKind::Adaptive => {
            let mut sched = Scheduler::new(cfg.scheduler.clone())?;
            train_loop(&data, &mut sched, &mut mlp, &cfg.train)?
        }
        SamplerKind::Baseline => {
            let sched = Scheduler::new(cfg.scheduler.clone())?;
            let mut fixed = FixedSampler::new(sched.base().clone());
            train_loop(&data, &mut fixed, &mut mlp, &cfg.train)?
        }
    };
    let ckpt = out.join("checkpoint.json");
    let log = out.join("train_log.csv");
    let refreshes = out.join("refresh_log.jsonl");
    io::write_json(io::create(&ckpt)?, &Checkpoint::from_mlp(&mlp))?;
    io::write_train_log_csv(io::create(&log)?, &outcome.log)?;
    io::write_jsonl(io::create(&refreshes)?, &outcome.refreshes)?;
    Ok(Outcome { inputs: vec![path], outputs: vec![ckpt, log, refreshes] })
}

fn build_grid(cfg: &GridConfig) -> CliResult<(InferenceGrid<f64>, Vec<PathBuf>)> {
    match cfg.mode {
        GridMode::Infogrid => {
            let path = require(&cfg.profile, "profile")?;
            let rate = io::read_profile_file(&path, &cfg.column)?;
            Ok((infogrid(&rate, cfg.steps)?, vec![path]))
        }
        GridMode::Reference => {
            let range = SigmaRange::new(cfg.sigma_min, cfg.sigma_max)?;
            Ok((reference_grid(cfg.steps, range, cfg.rho)?, Vec::new()))
        }
    }
}

pub fn grid(cfg: &GridConfig, out: &Path) -> CliResult<Outcome> {
    let (grid, inputs) = build_grid(cfg)?;
    let file = out.join("grid.csv");
    io::write_grid_csv(io::create(&file)?, &grid)?;
    Ok(Outcome { inputs, outputs: vec![file] })
}

pub fn sample(cfg: &SampleConfig, out: &Path) -> CliResult<Outcome> {
    let mut inputs = Vec::new();
    let grid = match &cfg.grid {
        Some(path) => {
            inputs.push(path.clone());
            io::read_grid_csv(io::open(path)?)?
        }
        None => reference_grid(cfg.steps, SigmaRange::new(cfg.sigma_min, cfg.sigma_max)?, cfg.rho)?,
    };
    let mut rng = substream(cfg.seed, Stream::Sample);
    let mut draw_inits = |dim: usize| -> Vec<Vec<f64>> {
        (0..cfg.n)
            .map(|_| {
                let mut x = vec![0.0; dim];
                fill_normal(&mut rng, &mut x);
                x.iter_mut().for_each(|v| *v *= grid.sigma_max());
                x
            })
            .collect()
    };
    let points = match cfg.denoiser {
        DenoiserKind::Oracle => {
            let path = require(&cfg.dataset, "dataset")?;
            let data = io::read_dataset_file(&path)?;
            inputs.push(path);
            heun_sample_many(&data, &grid, &draw_inits(data.dim()))?
        }
        DenoiserKind::Checkpoint => {
            let path = require(&cfg.checkpoint, "checkpoint")?;
            let ckpt: Checkpoint = io::read_json(io::open(&path)?)?;
            let mlp = ckpt.into_mlp::<f64>()?;
            inputs.push(path);
            heun_sample_many(&mlp, &grid, &draw_inits(mlp.dim()))?
        }
    };
    let file = out.join("samples.csv");
    io::write_points_csv(io::create(&file)?, &points)?;
    Ok(Outcome { inputs, outputs: vec![file] })
}

pub fn toy(cfg: &ToyConfig, out: &Path) -> CliResult<Outcome> {
    let model = TwoPointModel::new(cfg.a)?;
    let grid = LogGrid::new(SigmaRange::new(cfg.sigma_min, cfg.sigma_max)?, cfg.k)?;
    let rows = toy_table(&model, &grid, cfg.quad_order)?;
    let file = out.join("toy.csv");
    io::write_toy_csv(io::create(&file)?, &rows)?;
    Ok(Outcome { inputs: Vec::new(), outputs: vec![file] })
}
