//! Symmetric two-point data `x0 ∈ {-a, +a}` under Gaussian corruption.
//!
//! Everything is closed form: the Bayes denoiser is `a tanh(a x / sigma^2)`,
//! the posterior variance is `a^2 sech^2(a x / sigma^2)`, and the denoiser's
//! fixed points undergo a pitchfork bifurcation at `sigma_c = a`. The MMSE is
//! a one-dimensional Gaussian expectation evaluated by Gauss–Hermite
//! quadrature.

use crate::error::{Error, Result};
use crate::grid::{LogGrid, Profile};
use crate::oracle::Dataset;
use crate::scalar::Real;

pub const DEFAULT_QUAD_ORDER: usize = 128;
pub const MIN_QUAD_ORDER: usize = 16;

/// Atoms at `±a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPointModel<T> {
    a: T,
}

impl<T: Real> TwoPointModel<T> {
    pub fn new(a: T) -> Result<Self> {
        if !(a > T::zero() && a.is_finite()) {
            return Err(Error::Config(format!("two-point model needs a > 0, got {a}")));
        }
        Ok(Self { a })
    }

    #[inline]
    pub fn a(&self) -> T {
        self.a
    }

    /// Recognizes a one-dimensional dataset `{-a, +a}` (in either order).
    pub fn from_dataset(data: &Dataset<T>) -> Option<Self> {
        if data.dim() != 1 || data.len() != 2 {
            return None;
        }
        let (x, y) = (data.row(0)[0], data.row(1)[0]);
        if x + y == T::zero() && x != T::zero() {
            Self::new(x.abs()).ok()
        } else {
            None
        }
    }

    pub fn dataset(&self) -> Dataset<T> {
        Dataset::two_point(self.a)
    }
}

fn check_sigma<T: Real>(sigma: T) -> Result<()> {
    if sigma > T::zero() && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("sigma must be positive, got {sigma}")))
    }
}

/// `sech^2(y)` without overflow for large `|y|`.
#[inline]
fn sech2<T: Real>(y: T) -> T {
    let e = (-T::lit(2.0) * y.abs()).exp();
    let denom = T::one() + e;
    T::lit(4.0) * e / (denom * denom)
}

/// Bayes denoiser `a tanh(a x / sigma^2)`.
pub fn toy_denoiser<T: Real>(m: &TwoPointModel<T>, x: T, sigma: T) -> Result<T> {
    check_sigma(sigma)?;
    Ok(m.a * (m.a * x / (sigma * sigma)).tanh())
}

/// Posterior variance `a^2 sech^2(a x / sigma^2)`.
pub fn toy_posterior_var<T: Real>(m: &TwoPointModel<T>, x: T, sigma: T) -> Result<T> {
    check_sigma(sigma)?;
    Ok(m.a * m.a * sech2(m.a * x / (sigma * sigma)))
}

/// Score `(a tanh(a x / sigma^2) - x) / sigma^2`.
pub fn toy_score<T: Real>(m: &TwoPointModel<T>, x: T, sigma: T) -> Result<T> {
    let d = toy_denoiser(m, x, sigma)?;
    Ok((d - x) / (sigma * sigma))
}

/// Critical noise level `sigma_c = a` where the origin changes stability.
pub fn critical_sigma<T: Real>(m: &TwoPointModel<T>) -> T {
    m.a
}

/// Second derivative of `log p(x; sigma)` at `x = 0`: `(a^2 - sigma^2) / sigma^4`.
pub fn hessian_at_zero<T: Real>(m: &TwoPointModel<T>, sigma: T) -> Result<T> {
    check_sigma(sigma)?;
    let v = sigma * sigma;
    Ok((m.a * m.a - v) / (v * v))
}

/// Gauss–Hermite rule for `∫ exp(-t^2) f(t) dt`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Nodes are bracketed by a sign-change scan of the orthonormal Hermite
    /// function of degree `order`, then polished by safeguarded Newton steps.
    pub fn new(order: usize) -> Result<Self> {
        if order < MIN_QUAD_ORDER {
            return Err(Error::Config(format!("quadrature order must be at least {MIN_QUAD_ORDER}, got {order}")));
        }
        let n = order;
        let nf = n as f64;
        // psi_n(z), psi_{n-1}(z) and sum_{j<n} psi_j(z)^2, where psi_j is the
        // orthonormal Hermite polynomial times exp(-z^2/2); the damping keeps
        // the recurrence in range for large orders.
        let hermite_fns = |z: f64| {
            const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
            let (mut p1, mut p2) = (PIM4 * (-0.5 * z * z).exp(), 0.0);
            let mut sum_sq = 0.0;
            for j in 0..n {
                sum_sq += p1 * p1;
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            (p1, p2, sum_sq)
        };

        // all roots lie below sqrt(2n + 1); the closest pair is ~pi / sqrt(2n + 1) apart
        let upper = (2.0 * nf + 1.0).sqrt() + 1.0;
        let step = std::f64::consts::PI / (2.0 * nf + 1.0).sqrt() / 8.0;
        let mut positive = Vec::with_capacity(n / 2 + 1);
        let mut lo = if n % 2 == 1 { step / 2.0 } else { 0.0 };
        let mut f_lo = hermite_fns(lo).0;
        while lo < upper && positive.len() < n / 2 {
            let hi = lo + step;
            let f_hi = hermite_fns(hi).0;
            if f_lo == 0.0 || f_lo.signum() != f_hi.signum() {
                positive.push(polish_root(&hermite_fns, lo, hi, f_lo, nf));
            }
            lo = hi;
            f_lo = f_hi;
        }
        if positive.len() != n / 2 {
            return Err(Error::Degenerate(format!("found {} of {} Gauss-Hermite nodes", positive.len(), n / 2)));
        }

        let mut nodes = Vec::with_capacity(n);
        nodes.extend(positive.iter().rev());
        if n % 2 == 1 {
            nodes.push(0.0);
        }
        nodes.extend(positive.iter().map(|z| -z));
        // Christoffel weight: exp(-z^2) / sum_j psi_j(z)^2
        let weights = nodes
            .iter()
            .map(|&z| {
                let sum_sq = hermite_fns(z).2;
                if sum_sq > 0.0 {
                    (-z * z).exp() / sum_sq
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Physicists' nodes (weight `exp(-t^2)`), descending.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[f(Z)]` for `Z ~ N(0, 1)`.
    pub fn expect_standard_normal<T: Real>(&self, f: impl Fn(T) -> T) -> T {
        let scale = T::one() / T::PI().sqrt();
        let sqrt2 = T::lit(std::f64::consts::SQRT_2);
        self.nodes.iter().zip(&self.weights).map(|(&t, &w)| T::lit(w) * f(sqrt2 * T::lit(t))).sum::<T>() * scale
    }
}

fn polish_root(f: &impl Fn(f64) -> (f64, f64, f64), mut lo: f64, mut hi: f64, f_lo: f64, nf: f64) -> f64 {
    if f_lo == 0.0 {
        return lo;
    }
    let sign_lo = f_lo.signum();
    let mut z = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (p1, p2, _) = f(z);
        if p1 == 0.0 {
            return z;
        }
        if p1.signum() == sign_lo {
            lo = z;
        } else {
            hi = z;
        }
        // psi_n' = sqrt(2n) psi_{n-1} - z psi_n; the second term vanishes at the root
        let newton = z - p1 / ((2.0 * nf).sqrt() * p2 - z * p1);
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - z).abs() <= 1e-15 * z.abs().max(1.0) {
            return next;
        }
        z = next;
    }
    z
}

/// MMSE of the two-point law at `sigma` by Gauss–Hermite quadrature.
///
/// By symmetry one mixture component suffices:
/// `mmse = E_{eps}[a^2 sech^2(a (a + sigma eps) / sigma^2)]`.
pub fn toy_mmse<T: Real>(m: &TwoPointModel<T>, sigma: T, quad_order: usize) -> Result<T> {
    let gh = GaussHermite::new(quad_order)?;
    toy_mmse_with(m, sigma, &gh)
}

/// [`toy_mmse`] with a precomputed rule.
pub fn toy_mmse_with<T: Real>(m: &TwoPointModel<T>, sigma: T, gh: &GaussHermite) -> Result<T> {
    check_sigma(sigma)?;
    let (a, v) = (m.a, sigma * sigma);
    Ok(gh.expect_standard_normal(|e: T| a * a * sech2(a * (a + sigma * e) / v)))
}

/// `E[denoiser(x)^2]` under the noisy marginal, by the same quadrature.
pub fn toy_denoiser_second_moment<T: Real>(m: &TwoPointModel<T>, sigma: T, quad_order: usize) -> Result<T> {
    check_sigma(sigma)?;
    let gh = GaussHermite::new(quad_order)?;
    let (a, v) = (m.a, sigma * sigma);
    Ok(gh.expect_standard_normal(|e: T| {
        let t = (a * (a + sigma * e) / v).tanh();
        a * a * t * t
    }))
}

/// Quadrature MMSE at every center of `grid`.
pub fn toy_mmse_profile<T: Real>(m: &TwoPointModel<T>, grid: &LogGrid<T>, quad_order: usize) -> Result<Profile<T>> {
    let gh = GaussHermite::new(quad_order)?;
    let values = grid.centers().iter().map(|&s| toy_mmse_with(m, s, &gh)).collect::<Result<Vec<T>>>()?;
    Profile::new(grid.clone(), values)
}

/// Solutions of `x = a tanh(a x / sigma^2)`, sorted ascending.
///
/// Returns `[0]` for `sigma >= a` and `[-x*, 0, x*]` for `sigma < a`, with
/// `x*` located by bisection to width `tol`.
pub fn fixed_points<T: Real>(m: &TwoPointModel<T>, sigma: T, tol: T) -> Result<Vec<T>> {
    check_sigma(sigma)?;
    if !(tol > T::zero()) {
        return Err(Error::Config(format!("bisection tolerance must be positive, got {tol}")));
    }
    if sigma >= m.a {
        return Ok(vec![T::zero()]);
    }
    let v = sigma * sigma;
    let g = |x: T| m.a * (m.a * x / v).tanh() - x;
    let mut lo = tol.min(m.a * T::lit(0.5));
    while g(lo) <= T::zero() && lo > T::min_positive_value() {
        lo = lo * T::lit(0.5);
    }
    let mut hi = m.a;
    while hi - lo > tol {
        let mid = T::lit(0.5) * (lo + hi);
        if g(mid) > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = T::lit(0.5) * (lo + hi);
    Ok(vec![-root, T::zero(), root])
}

/// One row of the toy diagnostics table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyRow<T> {
    pub sigma: T,
    pub mmse: T,
    pub entropy_rate: T,
    /// Positive nonzero fixed point, or 0 above the critical noise level.
    pub x_star_pos: T,
    pub hessian_at_zero: T,
}

/// Diagnostics at every grid center.
pub fn toy_table<T: Real>(m: &TwoPointModel<T>, grid: &LogGrid<T>, quad_order: usize) -> Result<Vec<ToyRow<T>>> {
    let gh = GaussHermite::new(quad_order)?;
    grid.centers()
        .iter()
        .map(|&sigma| {
            let mmse = toy_mmse_with(m, sigma, &gh)?;
            let fp = fixed_points(m, sigma, T::lit(1e-12))?;
            Ok(ToyRow {
                sigma,
                mmse,
                entropy_rate: mmse / (sigma * sigma * sigma),
                x_star_pos: *fp.last().expect("at least one fixed point"),
                hessian_at_zero: hessian_at_zero(m, sigma)?,
            })
        })
        .collect()
}
