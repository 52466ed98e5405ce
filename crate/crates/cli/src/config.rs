//! Resolved per-subcommand configurations. Field names are the config-file
//! keys and, with `-` for `_`, the flag names.

use std::path::{Path, PathBuf};

use infonoise::allocate::{PivotMethod, ScheduleSpec, Weighting};
use infonoise::infer::DEFAULT_RHO;
use infonoise::scheduler::SchedulerConfig;
use infonoise::train::{Preconditioning, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Reads a TOML (`.toml`) or JSON (`.json`) config file.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let bad = |e: String| CliError::Config(format!("{}: {e}", path.display()));
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| bad(e.to_string())),
        Some("json") => serde_json::from_str(&text).map_err(|e| bad(e.to_string())),
        _ => Err(CliError::Config(format!("config {} must end in .toml or .json", path.display()))),
    }
}

/// Makes `path` absolute so that manifests replay from any directory.
pub fn absolute(path: &Path) -> CliResult<PathBuf> {
    Ok(std::path::absolute(path)?)
}

pub fn require(path: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    path.clone().ok_or_else(|| CliError::Config(format!("missing required --{flag}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub dataset: Option<PathBuf>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub k: usize,
    pub n_mc: usize,
    pub seed: u64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { dataset: None, sigma_min: 0.002, sigma_max: 80.0, k: 128, n_mc: 20_000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub profile: Option<PathBuf>,
    /// Profile column holding the entropy rate.
    pub column: String,
    pub weighting: Weighting<f64>,
    pub n_gate: f64,
    pub pivot: PivotMethod<f64>,
    pub smoothing: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let spec = ScheduleSpec::<f64>::default();
        Self {
            profile: None,
            column: "entropy_rate".into(),
            weighting: spec.weighting,
            n_gate: spec.n_gate,
            pivot: spec.pivot,
            smoothing: spec.smoothing,
        }
    }
}

impl ScheduleConfig {
    pub fn spec(&self) -> ScheduleSpec<f64> {
        ScheduleSpec { weighting: self.weighting, n_gate: self.n_gate, pivot: self.pivot, smoothing: self.smoothing }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub dataset: Option<PathBuf>,
    /// Number of sigma draws, one oracle loss each.
    pub steps: u64,
    pub seed: u64,
    /// Monte-Carlo budget of the offline reference when the dataset is not a
    /// symmetric two-point set (which uses quadrature instead).
    pub reference_n_mc: usize,
    pub scheduler: SchedulerConfig<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { dataset: None, steps: 50_000, seed: 0, reference_n_mc: 20_000, scheduler: SchedulerConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Online information-aligned scheduler.
    Adaptive,
    /// The scheduler's fixed baseline sampler.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub dataset: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub preconditioning: Preconditioning<f64>,
    pub sampler: SamplerKind,
    pub train: TrainConfig<f64>,
    pub scheduler: SchedulerConfig<f64>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            hidden: vec![64, 64],
            preconditioning: Preconditioning::None,
            sampler: SamplerKind::Adaptive,
            train: TrainConfig::default(),
            scheduler: SchedulerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    Infogrid,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub mode: GridMode,
    pub steps: usize,
    /// Rate profile for `infogrid`.
    pub profile: Option<PathBuf>,
    pub column: String,
    /// Range and exponent for `reference`.
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            mode: GridMode::Reference,
            steps: 18,
            profile: None,
            column: "entropy_rate".into(),
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: DEFAULT_RHO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    Oracle,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub denoiser: DenoiserKind,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Grid CSV; when absent a reference grid is built from the fields below.
    pub grid: Option<PathBuf>,
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub n: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserKind::Oracle,
            dataset: None,
            checkpoint: None,
            grid: None,
            steps: 18,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: DEFAULT_RHO,
            n: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub a: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub k: usize,
    pub quad_order: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { a: 1.0, sigma_min: 0.01, sigma_max: 100.0, k: 128, quad_order: infonoise::toy::DEFAULT_QUAD_ORDER }
    }
}
