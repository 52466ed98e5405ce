//! Online schedule adaptation.
//!
//! The scheduler routes every `(sigma, loss)` pair produced by training to its
//! log-grid cell, keeps a bounded FIFO of recent losses per cell, and every
//! `m` draws (after warm-up, once every cell holds at least `n_min` losses)
//! rebuilds the sampling density:
//!
//! 1. buffer means are folded into a per-cell EMA of the MSE;
//! 2. the rate estimate is `mse_k / sigma_k^3`;
//! 3. a pivot is calibrated on that rate and the gate applied (optionally
//!    followed by 3-point smoothing);
//! 4. dividing by the loss weight gives the new sampling density.
//!
//! Published snapshots are immutable and swapped in atomically, so any number
//! of [`SnapshotHandle`]s may sample concurrently with the single writer.

use std::collections::VecDeque;
use std::sync::{Arc, RwLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocate::{
    apply_gate, baseline_sampler, smooth3, Baseline, GateParams, PivotMethod, ScheduleSpec, Weighting,
};
use crate::error::{Error, Result};
use crate::grid::{LogGrid, Profile, SigmaRange, TabulatedDensity};
use crate::oracle::{sample_oracle_loss, Dataset};
use crate::rng::{substream, Stream};
use crate::scalar::Real;

/// Scheduler settings. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(serialize = "T: Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct SchedulerConfig<T> {
    pub sigma_min: T,
    pub sigma_max: T,
    /// Number of log-grid cells.
    pub k: usize,
    pub pi_base: Baseline<T>,
    pub n_warm: u64,
    /// Refresh period, counted in sigma draws.
    pub m: u64,
    /// FIFO capacity per cell.
    pub b: usize,
    /// EMA rate in (0, 1].
    pub beta: T,
    pub weighting: Weighting<T>,
    pub n_gate: T,
    pub n_min: usize,
    pub pivot: PivotMethod<T>,
    pub smoothing: bool,
    /// Seed each cell's EMA with its first buffer mean instead of decaying
    /// from zero.
    pub ema_seed_first: bool,
    /// Empty the FIFOs (and their counts) after each refresh.
    pub clear_buffers: bool,
}

impl<T: Real> Default for SchedulerConfig<T> {
    fn default() -> Self {
        Self {
            sigma_min: T::lit(0.002),
            sigma_max: T::lit(80.0),
            k: crate::grid::DEFAULT_CELLS,
            pi_base: Baseline::LogUniform,
            n_warm: 5000,
            m: 1000,
            b: 256,
            beta: T::lit(0.1),
            weighting: Weighting::Unit,
            n_gate: T::lit(crate::allocate::DEFAULT_GATE_EXPONENT),
            n_min: 8,
            pivot: PivotMethod::default(),
            smoothing: true,
            ema_seed_first: true,
            clear_buffers: false,
        }
    }
}

impl<T: Real> SchedulerConfig<T> {
    pub fn validate(&self) -> Result<()> {
        SigmaRange::new(self.sigma_min, self.sigma_max)?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k < 2 {
            return bad(format!("k must be >= 2, got {}", self.k));
        }
        if self.m < 1 {
            return bad("refresh period m must be >= 1".into());
        }
        if self.b < 1 {
            return bad("fifo capacity b must be >= 1".into());
        }
        if !(self.beta > T::zero() && self.beta <= T::one()) {
            return bad(format!("beta must lie in (0, 1], got {}", self.beta));
        }
        if self.n_min < 1 {
            return bad("n_min must be >= 1".into());
        }
        if !(self.n_gate >= T::lit(2.0)) {
            return bad(format!("n_gate must be >= 2, got {}", self.n_gate));
        }
        self.weighting.validate()?;
        self.pivot.validate()
    }

    pub fn grid(&self) -> Result<LogGrid<T>> {
        LogGrid::new(SigmaRange::new(self.sigma_min, self.sigma_max)?, self.k)
    }

    /// The offline pipeline settings matching this scheduler.
    pub fn schedule_spec(&self) -> ScheduleSpec<T> {
        ScheduleSpec { weighting: self.weighting, n_gate: self.n_gate, pivot: self.pivot, smoothing: self.smoothing }
    }
}

/// Per-cell loss statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BinState<T> {
    buffer: VecDeque<T>,
    count: usize,
    ema_mse: Option<T>,
}

impl<T: Real> BinState<T> {
    fn new(capacity: usize) -> Self {
        Self { buffer: VecDeque::with_capacity(capacity), count: 0, ema_mse: None }
    }

    pub fn buffer(&self) -> impl Iterator<Item = &T> {
        self.buffer.iter()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn ema_mse(&self) -> Option<T> {
        self.ema_mse
    }

    fn buffer_mean(&self) -> T {
        let sum: T = self.buffer.iter().copied().sum();
        sum / T::count(self.buffer.len())
    }
}

/// An immutable published sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSnapshot<T> {
    pub version: u64,
    /// Draw counter at publication.
    pub step: u64,
    pub density: TabulatedDensity<T>,
    /// Gated (and optionally smoothed) rate used to build `density`;
    /// `None` for the initial baseline snapshot.
    pub rate_profile: Option<Profile<T>>,
    pub pivot_c: Option<T>,
}

/// Shared read access to the latest snapshot.
#[derive(Debug, Clone)]
pub struct SnapshotHandle<T> {
    slot: Arc<RwLock<Arc<ScheduleSnapshot<T>>>>,
}

impl<T: Real> SnapshotHandle<T> {
    fn new(initial: ScheduleSnapshot<T>) -> Self {
        Self { slot: Arc::new(RwLock::new(Arc::new(initial))) }
    }

    pub fn load(&self) -> Arc<ScheduleSnapshot<T>> {
        Arc::clone(&self.slot.read().expect("snapshot lock poisoned"))
    }

    fn publish(&self, snapshot: ScheduleSnapshot<T>) -> Arc<ScheduleSnapshot<T>> {
        let snapshot = Arc::new(snapshot);
        *self.slot.write().expect("snapshot lock poisoned") = Arc::clone(&snapshot);
        snapshot
    }

    /// Draws from the current snapshot without touching the step counter.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        self.load().density.sample(rng)
    }
}

/// The online schedule-adaptation state machine (single writer).
#[derive(Debug)]
pub struct Scheduler<T> {
    config: SchedulerConfig<T>,
    grid: LogGrid<T>,
    base: TabulatedDensity<T>,
    bins: Vec<BinState<T>>,
    step: u64,
    last_checked: u64,
    rate_hat: Option<Profile<T>>,
    published: SnapshotHandle<T>,
    skipped_refreshes: u64,
}

impl<T: Real> Scheduler<T> {
    /// Scheduler with `pi_base` tabulated from `config.pi_base`.
    pub fn new(config: SchedulerConfig<T>) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let base = baseline_sampler(&config.pi_base, &grid)?;
        Self::with_base(config, base)
    }

    /// Scheduler with an explicit baseline density on the configured grid.
    pub fn with_base(config: SchedulerConfig<T>, base: TabulatedDensity<T>) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        if base.grid() != &grid {
            return Err(Error::Config("baseline density lives on a different grid".into()));
        }
        let bins = (0..grid.len()).map(|_| BinState::new(config.b)).collect();
        let published = SnapshotHandle::new(ScheduleSnapshot {
            version: 0,
            step: 0,
            density: base.clone(),
            rate_profile: None,
            pivot_c: None,
        });
        Ok(Self { config, grid, base, bins, step: 0, last_checked: 0, rate_hat: None, published, skipped_refreshes: 0 })
    }

    pub fn config(&self) -> &SchedulerConfig<T> {
        &self.config
    }

    pub fn grid(&self) -> &LogGrid<T> {
        &self.grid
    }

    pub fn base(&self) -> &TabulatedDensity<T> {
        &self.base
    }

    pub fn bins(&self) -> &[BinState<T>] {
        &self.bins
    }

    /// Number of sigma draws so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Refreshes abandoned because the gated profile was degenerate.
    pub fn skipped_refreshes(&self) -> u64 {
        self.skipped_refreshes
    }

    pub fn snapshot(&self) -> Arc<ScheduleSnapshot<T>> {
        self.published.load()
    }

    /// Read-only handle for concurrent samplers.
    pub fn handle(&self) -> SnapshotHandle<T> {
        self.published.clone()
    }

    /// Advances the draw counter and samples from `pi_base` during warm-up,
    /// otherwise from the published snapshot.
    pub fn sample_sigma<R: Rng + ?Sized>(&mut self, rng: &mut R) -> T {
        self.step += 1;
        if self.step <= self.config.n_warm {
            self.base.sample(rng)
        } else {
            self.published.sample(rng)
        }
    }

    /// Pushes an unweighted loss into the FIFO of the cell containing `sigma`.
    pub fn record_loss(&mut self, sigma: T, loss: T) -> Result<()> {
        if !(loss.is_finite() && loss >= T::zero()) {
            return Err(Error::Data(format!("loss must be finite and nonnegative, got {loss}")));
        }
        let k = self.grid.locate(sigma)?;
        let bin = &mut self.bins[k];
        if bin.buffer.len() == self.config.b {
            bin.buffer.pop_front();
        }
        bin.buffer.push_back(loss);
        bin.count = (bin.count + 1).min(self.config.b);
        Ok(())
    }

    /// Runs the refresh guard and, when it passes, rebuilds and publishes a
    /// new snapshot.
    ///
    /// The period test fires when a multiple of `m` was reached since the
    /// previous call, so callers that record a whole batch between calls do
    /// not skip refreshes.
    pub fn maybe_refresh(&mut self) -> Option<Arc<ScheduleSnapshot<T>>> {
        let m = self.config.m;
        let crossed = self.step / m > self.last_checked / m;
        self.last_checked = self.step;
        if !(crossed && self.step > self.config.n_warm) {
            return None;
        }
        if self.bins.iter().any(|b| b.count < self.config.n_min) {
            return None;
        }
        self.refresh()
    }

    fn refresh(&mut self) -> Option<Arc<ScheduleSnapshot<T>>> {
        let beta = self.config.beta;
        let seed_first = self.config.ema_seed_first;
        for bin in &mut self.bins {
            let mean = bin.buffer_mean();
            bin.ema_mse = Some(match bin.ema_mse {
                None if seed_first => mean,
                None => beta * mean,
                Some(prev) => (T::one() - beta) * prev + beta * mean,
            });
            if self.config.clear_buffers {
                bin.buffer.clear();
                bin.count = 0;
            }
        }
        let rate: Vec<T> = self
            .bins
            .iter()
            .zip(self.grid.centers())
            .map(|(b, &s)| b.ema_mse.unwrap_or_else(T::zero) / (s * s * s))
            .collect();
        let rate_hat = match Profile::new(self.grid.clone(), rate) {
            Ok(p) => p,
            Err(_) => {
                self.skipped_refreshes += 1;
                return None;
            }
        };
        self.rate_hat = Some(rate_hat.clone());

        match self.build_snapshot(&rate_hat) {
            Ok((density, rate_tilde, c)) => {
                let version = self.published.load().version + 1;
                Some(self.published.publish(ScheduleSnapshot {
                    version,
                    step: self.step,
                    density,
                    rate_profile: Some(rate_tilde),
                    pivot_c: Some(c),
                }))
            }
            Err(_) => {
                self.skipped_refreshes += 1;
                None
            }
        }
    }

    fn build_snapshot(&self, rate_hat: &Profile<T>) -> Result<(TabulatedDensity<T>, Profile<T>, T)> {
        let c = self.config.pivot.calibrate(rate_hat)?;
        let mut rate_tilde = apply_gate(rate_hat, &GateParams::new(c, self.config.n_gate)?);
        if self.config.smoothing {
            rate_tilde = smooth3(&rate_tilde);
        }
        let w = self.config.weighting;
        let q = rate_tilde.map(|s, r| r / w.eval(s))?;
        Ok((build_sampler(&q)?, rate_tilde, c))
    }

    /// Current ungated rate estimate `mse_k / sigma_k^3`.
    pub fn export_profile(&self) -> Result<Profile<T>> {
        self.rate_hat.clone().ok_or_else(|| Error::Absent("no refresh has completed yet".into()))
    }
}

/// Normalizes per-cell sampling weights into a continuous sampler.
pub fn build_sampler<T: Real>(q: &Profile<T>) -> Result<TabulatedDensity<T>> {
    TabulatedDensity::from_profile(q)
}

/// A source of training noise levels that may adapt to observed losses.
pub trait NoiseSource<T: Real> {
    fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> T;

    fn observe(&mut self, sigma: T, loss: T) -> Result<()>;

    /// Called once per optimizer step after all observations.
    fn end_step(&mut self) -> Option<Arc<ScheduleSnapshot<T>>>;

    fn snapshot_version(&self) -> u64;
}

impl<T: Real> NoiseSource<T> for Scheduler<T> {
    fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> T {
        self.sample_sigma(rng)
    }

    fn observe(&mut self, sigma: T, loss: T) -> Result<()> {
        self.record_loss(sigma, loss)
    }

    fn end_step(&mut self) -> Option<Arc<ScheduleSnapshot<T>>> {
        self.maybe_refresh()
    }

    fn snapshot_version(&self) -> u64 {
        self.published.load().version
    }
}

/// A non-adaptive sampler over a fixed density.
#[derive(Debug, Clone)]
pub struct FixedSampler<T> {
    density: TabulatedDensity<T>,
}

impl<T: Real> FixedSampler<T> {
    pub fn new(density: TabulatedDensity<T>) -> Self {
        Self { density }
    }
}

impl<T: Real> NoiseSource<T> for FixedSampler<T> {
    fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> T {
        self.density.sample(rng)
    }

    fn observe(&mut self, _sigma: T, loss: T) -> Result<()> {
        if loss.is_finite() && loss >= T::zero() {
            Ok(())
        } else {
            Err(Error::Data(format!("loss must be finite and nonnegative, got {loss}")))
        }
    }

    fn end_step(&mut self) -> Option<Arc<ScheduleSnapshot<T>>> {
        None
    }

    fn snapshot_version(&self) -> u64 {
        0
    }
}

/// One JSON-lines record of the refresh log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub step: u64,
    pub version: u64,
    pub pivot_c: f64,
    pub r_hat: Vec<f64>,
    pub r_tilde: Vec<f64>,
    pub density: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv_to_reference: Option<f64>,
}

impl RefreshRecord {
    pub fn new<T: Real>(snapshot: &ScheduleSnapshot<T>, rate_hat: &Profile<T>) -> Self {
        let to64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        Self {
            step: snapshot.step,
            version: snapshot.version,
            pivot_c: snapshot.pivot_c.map_or(f64::NAN, Real::as_f64),
            r_hat: to64(rate_hat.values()),
            r_tilde: snapshot.rate_profile.as_ref().map(|p| to64(p.values())).unwrap_or_default(),
            density: to64(snapshot.density.density()),
            tv_to_reference: None,
        }
    }
}

/// Drives a fresh scheduler with stochastic oracle losses on `data`, one
/// sigma draw and one loss per step, and returns the refresh log. When a
/// reference density on the scheduler grid is given, every record carries its
/// total-variation distance to the published density.
pub fn simulate_oracle<T: Real>(
    data: &Dataset<T>,
    config: SchedulerConfig<T>,
    steps: u64,
    seed: u64,
    reference: Option<&TabulatedDensity<T>>,
) -> Result<Vec<RefreshRecord>> {
    let mut sched = Scheduler::new(config)?;
    if let Some(r) = reference {
        if r.grid() != sched.grid() {
            return Err(Error::Config("reference density must live on the scheduler grid".into()));
        }
    }
    let mut sigma_rng = substream(seed, Stream::Scheduler);
    let mut loss_rng = substream(seed, Stream::Data);
    let mut log = Vec::new();
    for _ in 0..steps {
        let sigma = sched.sample_sigma(&mut sigma_rng);
        let loss = sample_oracle_loss(data, sigma, &mut loss_rng)?;
        sched.record_loss(sigma, loss)?;
        if let Some(snap) = sched.maybe_refresh() {
            let mut rec = RefreshRecord::new(&snap, &sched.export_profile()?);
            if let Some(r) = reference {
                rec.tv_to_reference = Some(snap.density.total_variation(r)?.as_f64());
            }
            log.push(rec);
        }
    }
    Ok(log)
}
