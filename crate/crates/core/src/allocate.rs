//! From entropy-rate profiles to training schedules.
//!
//! The pipeline is: calibrate a pivot `c` on the raw rate profile, multiply by
//! the low-noise gate `g(sigma) = sigma^n / (sigma^n + c^n)`, normalize into a
//! target allocation `rho` (whose CDF is the entropic time `u`), and divide by
//! the loss weight to get the sampling density `pi ∝ rho / w`. The product
//! `pi * w` (the effective emphasis) is then proportional to `rho`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LogGrid, Profile, TabulatedDensity};
use crate::scalar::Real;

/// Default onset threshold on the max-normalized rate.
pub const DEFAULT_ONSET_THRESHOLD: f64 = 0.002;
/// Default gate exponent.
pub const DEFAULT_GATE_EXPONENT: f64 = 3.0;
pub const DEFAULT_POWERLAW_WINDOW: usize = 9;
pub const DEFAULT_POWERLAW_SLOPE_TOL: f64 = 0.15;

/// Pivot and exponent of the smooth low-noise gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams<T> {
    pub c: T,
    pub n: T,
}

impl<T: Real> GateParams<T> {
    pub fn new(c: T, n: T) -> Result<Self> {
        if !(c > T::zero() && c.is_finite()) {
            return Err(Error::Config(format!("gate pivot must be positive, got {c}")));
        }
        if !(n >= T::lit(2.0) && n.is_finite()) {
            return Err(Error::Config(format!("gate exponent must be >= 2, got {n}")));
        }
        Ok(Self { c, n })
    }

    /// `sigma^n / (sigma^n + c^n)`, evaluated as `1 / (1 + (c/sigma)^n)`.
    #[inline]
    pub fn eval(&self, sigma: T) -> T {
        T::one() / (T::one() + (self.c / sigma).powf(self.n))
    }
}

/// Gate value at `sigma`; strictly increasing, equal to 1/2 at `sigma = c`.
pub fn gate<T: Real>(sigma: T, params: &GateParams<T>) -> Result<T> {
    if !(sigma > T::zero()) {
        return Err(Error::Domain(format!("gate needs sigma > 0, got {sigma}")));
    }
    Ok(params.eval(sigma))
}

/// Per-noise loss weight of the training objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Weighting<T> {
    #[default]
    Unit,
    Edm {
        sigma_data: T,
    },
}

impl<T: Real> Weighting<T> {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Weighting::Unit => Ok(()),
            Weighting::Edm { sigma_data } if sigma_data > T::zero() && sigma_data.is_finite() => Ok(()),
            Weighting::Edm { sigma_data } => {
                Err(Error::Config(format!("edm weighting needs sigma_data > 0, got {sigma_data}")))
            }
        }
    }

    /// `w(sigma)`; assumes `sigma > 0`.
    #[inline]
    pub fn eval(&self, sigma: T) -> T {
        match *self {
            Weighting::Unit => T::one(),
            Weighting::Edm { sigma_data } => {
                let sd2 = sigma_data * sigma_data;
                (sigma * sigma + sd2) / (sigma * sigma * sd2)
            }
        }
    }
}

/// Loss weight at `sigma`.
pub fn loss_weight<T: Real>(w: &Weighting<T>, sigma: T) -> Result<T> {
    if !(sigma > T::zero()) {
        return Err(Error::Domain(format!("loss weight needs sigma > 0, got {sigma}")));
    }
    w.validate()?;
    Ok(w.eval(sigma))
}

/// How the gate pivot is calibrated from a rate profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PivotMethod<T> {
    /// First persistent crossing of `p` by the max-normalized rate, scanning
    /// from high to low noise.
    Onset { p: T },
    /// Upper end of the stable log-log power-law segment next to `sigma_min`.
    Powerlaw { window: usize, slope_tol: T },
}

impl<T: Real> Default for PivotMethod<T> {
    fn default() -> Self {
        PivotMethod::Onset { p: T::lit(DEFAULT_ONSET_THRESHOLD) }
    }
}

impl<T: Real> PivotMethod<T> {
    pub fn powerlaw_default() -> Self {
        PivotMethod::Powerlaw { window: DEFAULT_POWERLAW_WINDOW, slope_tol: T::lit(DEFAULT_POWERLAW_SLOPE_TOL) }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PivotMethod::Onset { p } if p > T::zero() && p < T::one() => Ok(()),
            PivotMethod::Onset { p } => Err(Error::Config(format!("onset threshold must lie in (0,1), got {p}"))),
            PivotMethod::Powerlaw { window, slope_tol } => {
                if window < 3 {
                    Err(Error::Config(format!("power-law window must be >= 3, got {window}")))
                } else if !(slope_tol > T::zero()) {
                    Err(Error::Config(format!("slope tolerance must be positive, got {slope_tol}")))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn calibrate(&self, profile: &Profile<T>) -> Result<T> {
        self.validate()?;
        match *self {
            PivotMethod::Onset { p } => calibrate_pivot_onset(profile, p),
            PivotMethod::Powerlaw { window, slope_tol } => calibrate_pivot_powerlaw(profile, window, slope_tol),
        }
    }
}

/// Onset-of-information pivot.
///
/// Normalizes by the peak and returns the smallest grid center above the last
/// cell (scanning downward from `sigma_max`) whose normalized rate reaches
/// `p`. If the top cell already reaches `p`, returns `sigma_min` so that the
/// gate is inert.
pub fn calibrate_pivot_onset<T: Real>(profile: &Profile<T>, p: T) -> Result<T> {
    let peak = profile.max_value();
    if !(peak > T::zero()) {
        return Err(Error::Degenerate("onset pivot needs a profile with positive maximum".into()));
    }
    let values = profile.values();
    let last = values.len() - 1;
    let crossing = (0..=last).rev().find(|&k| values[k] / peak >= p).expect("peak cell reaches any p < 1");
    if crossing == last {
        Ok(profile.grid().range().min())
    } else {
        Ok(profile.grid().centers()[crossing + 1])
    }
}

/// Outcome of power-law pivot detection.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerLawFit<T> {
    pub pivot: T,
    /// Local log-log slopes at every center.
    pub slopes: Vec<T>,
    /// Number of cells in the stable segment, when one of at least `window`
    /// cells was found.
    pub segment_cells: Option<usize>,
    /// Cell chosen by the curvature fallback.
    pub knee_cell: Option<usize>,
}

/// Least-squares log-log slopes over sliding windows of `window` cells,
/// shifted inward at the grid ends.
pub fn log_log_slopes<T: Real>(profile: &Profile<T>, window: usize) -> Result<Vec<T>> {
    if let Some(k) = profile.values().iter().position(|&v| !(v > T::zero())) {
        return Err(Error::Degenerate(format!("log-log slope needs positive values (cell {k})")));
    }
    let xs: Vec<T> = profile.grid().centers().iter().map(|s| s.ln()).collect();
    let ys: Vec<T> = profile.values().iter().map(|v| v.ln()).collect();
    let n = xs.len();
    let w = window.min(n);
    let half = w / 2;
    Ok((0..n)
        .map(|k| {
            let start = k.saturating_sub(half).min(n - w);
            let (x, y) = (&xs[start..start + w], &ys[start..start + w]);
            let count = T::count(w);
            let mx = x.iter().copied().sum::<T>() / count;
            let my = y.iter().copied().sum::<T>() / count;
            let sxy: T = x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)).sum();
            let sxx: T = x.iter().map(|&a| (a - mx) * (a - mx)).sum();
            sxy / sxx
        })
        .collect())
}

/// Power-law boundary detection with a curvature-knee fallback.
pub fn fit_power_law_pivot<T: Real>(profile: &Profile<T>, window: usize, slope_tol: T) -> Result<PowerLawFit<T>> {
    PivotMethod::Powerlaw { window, slope_tol }.validate()?;
    let slopes = log_log_slopes(profile, window)?;
    let n = slopes.len();

    // grow the segment from sigma_min while every slope stays within tol of
    // the running mean
    let mut seg_len = 0;
    let mut sum = T::zero();
    for m in 0..n {
        sum = sum + slopes[m];
        let mean = sum / T::count(m + 1);
        if slopes[..=m].iter().all(|&s| (s - mean).abs() <= slope_tol) {
            seg_len = m + 1;
        } else {
            break;
        }
    }

    if seg_len >= window.min(n) {
        let pivot = profile.grid().edges()[seg_len];
        return Ok(PowerLawFit { pivot, slopes, segment_cells: Some(seg_len), knee_cell: None });
    }

    let knee = knee_cell(profile)?;
    Ok(PowerLawFit { pivot: profile.grid().centers()[knee], slopes, segment_cells: None, knee_cell: Some(knee) })
}

/// Interior cell maximizing the absolute second difference of `log r` in
/// `log sigma`.
pub fn knee_cell<T: Real>(profile: &Profile<T>) -> Result<usize> {
    let ys: Vec<T> = profile.values().iter().map(|v| v.ln()).collect();
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::Degenerate("knee detection needs positive values".into()));
    }
    if ys.len() < 3 {
        return Ok(0);
    }
    let mut best = 1;
    let mut best_val = T::neg_infinity();
    for k in 1..ys.len() - 1 {
        let curv = (ys[k + 1] - ys[k] - ys[k] + ys[k - 1]).abs();
        if curv > best_val {
            best_val = curv;
            best = k;
        }
    }
    Ok(best)
}

/// Power-law pivot; see [`fit_power_law_pivot`].
pub fn calibrate_pivot_powerlaw<T: Real>(profile: &Profile<T>, window: usize, slope_tol: T) -> Result<T> {
    fit_power_law_pivot(profile, window, slope_tol).map(|f| f.pivot)
}

/// Pointwise product of a profile with the gate.
pub fn apply_gate<T: Real>(profile: &Profile<T>, params: &GateParams<T>) -> Profile<T> {
    profile.map(|s, v| v * params.eval(s)).expect("gating preserves finiteness")
}

/// 3-point moving average along the grid; end cells average their single
/// neighbour with themselves.
pub fn smooth3<T: Real>(profile: &Profile<T>) -> Profile<T> {
    let v = profile.values();
    let n = v.len();
    let values = (0..n)
        .map(|k| {
            let lo = k.saturating_sub(1);
            let hi = (k + 1).min(n - 1);
            let sum: T = v[lo..=hi].iter().copied().sum();
            sum / T::count(hi - lo + 1)
        })
        .collect();
    Profile::new(profile.grid().clone(), values).expect("averaging preserves finiteness")
}

/// Target allocation `rho` and its CDF, the entropic time `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation<T> {
    rho: TabulatedDensity<T>,
}

impl<T: Real> Allocation<T> {
    /// Wraps an already tabulated allocation (for example one read from disk).
    pub fn from_rho(rho: TabulatedDensity<T>) -> Self {
        Self { rho }
    }

    pub fn rho(&self) -> &TabulatedDensity<T> {
        &self.rho
    }

    /// Entropic time `u(sigma)`.
    pub fn u(&self, sigma: T) -> Result<T> {
        self.rho.cdf_at(sigma)
    }

    /// `u^{-1}(z)` by piecewise-linear interpolation.
    pub fn u_inverse(&self, z: T) -> Result<T> {
        self.rho.inverse_cdf(z)
    }

    /// `u` tabulated at the grid edges.
    pub fn u_table(&self) -> &[T] {
        self.rho.cdf()
    }
}

/// Normalizes a (gated) rate profile into a target allocation.
pub fn build_allocation<T: Real>(gated: &Profile<T>) -> Result<Allocation<T>> {
    Ok(Allocation { rho: TabulatedDensity::from_profile(gated)? })
}

/// Sampling density `pi ∝ rho / w` for an arbitrary positive weight function.
pub fn schedule_from_weight_fn<T: Real>(alloc: &Allocation<T>, w: impl Fn(T) -> T) -> Result<TabulatedDensity<T>> {
    let rho = alloc.rho.to_profile();
    let mut q = Vec::with_capacity(rho.values().len());
    for (s, r) in rho.iter() {
        let wk = w(s);
        if !(wk > T::zero() && wk.is_finite()) {
            return Err(Error::Config(format!("loss weight must be positive at sigma {s}, got {wk}")));
        }
        q.push(r / wk);
    }
    TabulatedDensity::from_profile(&Profile::new(rho.grid().clone(), q)?)
}

/// Sampling density `pi ∝ rho / w`, so that `pi * w ∝ rho`.
pub fn schedule_from_allocation<T: Real>(alloc: &Allocation<T>, w: &Weighting<T>) -> Result<TabulatedDensity<T>> {
    w.validate()?;
    if let Weighting::Unit = w {
        return Ok(alloc.rho.clone());
    }
    schedule_from_weight_fn(alloc, |s| w.eval(s))
}

/// Effective emphasis `phi(sigma_k) = pi(sigma_k) * w(sigma_k)`.
pub fn effective_emphasis<T: Real>(pi: &TabulatedDensity<T>, w: &Weighting<T>) -> Result<Profile<T>> {
    w.validate()?;
    pi.to_profile().map(|s, p| p * w.eval(s))
}

/// Settings of the offline rate-to-schedule pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(serialize = "T: Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct ScheduleSpec<T> {
    pub weighting: Weighting<T>,
    pub n_gate: T,
    pub pivot: PivotMethod<T>,
    /// 3-point smoothing of the gated profile.
    pub smoothing: bool,
}

impl<T: Real> Default for ScheduleSpec<T> {
    fn default() -> Self {
        Self {
            weighting: Weighting::Unit,
            n_gate: T::lit(DEFAULT_GATE_EXPONENT),
            pivot: PivotMethod::default(),
            smoothing: false,
        }
    }
}

/// Every intermediate of the offline pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule<T> {
    pub gate: GateParams<T>,
    /// Ungated rate as given.
    pub rate: Profile<T>,
    /// Gated (and optionally smoothed) rate.
    pub gated: Profile<T>,
    pub allocation: Allocation<T>,
    /// Sampling density.
    pub pi: TabulatedDensity<T>,
    /// Effective emphasis `pi * w` at the cell centers.
    pub phi: Profile<T>,
}

/// Pivot calibration, gating, optional smoothing, allocation and the
/// weight-corrected sampling density, in one call.
pub fn build_schedule<T: Real>(rate: &Profile<T>, spec: &ScheduleSpec<T>) -> Result<Schedule<T>> {
    spec.weighting.validate()?;
    if rate.values().iter().any(|&v| v < T::zero()) {
        return Err(Error::Domain("rate profile must be nonnegative".into()));
    }
    let c = spec.pivot.calibrate(rate)?;
    let gate = GateParams::new(c, spec.n_gate)?;
    let mut gated = apply_gate(rate, &gate);
    if spec.smoothing {
        gated = smooth3(&gated);
    }
    let allocation = build_allocation(&gated)?;
    let pi = schedule_from_allocation(&allocation, &spec.weighting)?;
    let phi = effective_emphasis(&pi, &spec.weighting)?;
    Ok(Schedule { gate, rate: rate.clone(), gated, allocation, pi, phi })
}

/// Fixed reference samplers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline<T> {
    /// Density ∝ 1/sigma on the range.
    #[default]
    LogUniform,
    /// `log sigma ~ Normal(mean, std^2)`, truncated to the range.
    LogNormal { mean: T, std: T },
}

impl<T: Real> Baseline<T> {
    /// Conventional log-normal parameters (`mean = -1.2`, `std = 1.2`).
    pub fn edm_log_normal() -> Self {
        Baseline::LogNormal { mean: T::lit(-1.2), std: T::lit(1.2) }
    }
}

/// Tabulates a baseline sampler on `grid`.
pub fn baseline_sampler<T: Real>(kind: &Baseline<T>, grid: &LogGrid<T>) -> Result<TabulatedDensity<T>> {
    let profile = match *kind {
        Baseline::LogUniform => Profile::from_fn(grid.clone(), |s| T::one() / s)?,
        Baseline::LogNormal { mean, std } => {
            if !(std > T::zero() && std.is_finite() && mean.is_finite()) {
                return Err(Error::Config(format!("log-normal baseline needs std > 0, got {std}")));
            }
            let norm = T::one() / (std * (T::lit(2.0) * T::PI()).sqrt());
            Profile::from_fn(grid.clone(), |s| {
                let z = (s.ln() - mean) / std;
                norm / s * (-T::lit(0.5) * z * z).exp()
            })?
        }
    };
    TabulatedDensity::from_profile(&profile).map_err(|e| match e {
        Error::Degenerate(msg) => Error::Config(format!("baseline has no mass on the range: {msg}")),
        other => other,
    })
}
