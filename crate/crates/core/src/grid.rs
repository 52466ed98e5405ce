//! Log-spaced noise grids, tabulated profiles, and normalized densities with
//! inverse-CDF sampling.
//!
//! A [`LogGrid`] partitions `[sigma_min, sigma_max]` into `K` cells of equal
//! width in `log sigma`. Profiles are tabulated at the geometric cell centers.
//! A [`TabulatedDensity`] carries point values at the centers together with a
//! CDF tabulated at the cell edges; the CDF is piecewise linear in `sigma`,
//! so sampling is continuous inside every cell.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Closed noise interval `[min, max]` with `0 < min < max`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SigmaRange<T> {
    min: T,
    max: T,
}

impl<T: Real> SigmaRange<T> {
    pub fn new(min: T, max: T) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min > T::zero() && min < max) {
            return Err(Error::Config(format!(
                "invalid sigma range [{}, {}]: need 0 < sigma_min < sigma_max",
                min, max
            )));
        }
        Ok(Self { min, max })
    }

    #[inline]
    pub fn min(&self) -> T {
        self.min
    }

    #[inline]
    pub fn max(&self) -> T {
        self.max
    }

    #[inline]
    pub fn contains(&self, sigma: T) -> bool {
        sigma >= self.min && sigma <= self.max
    }

    pub fn width(&self) -> T {
        self.max - self.min
    }
}

impl Default for SigmaRange<f64> {
    fn default() -> Self {
        Self { min: 0.002, max: 80.0 }
    }
}

/// Default number of log-grid cells.
pub const DEFAULT_CELLS: usize = 128;

/// Equal-log-width partition of a [`SigmaRange`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogGrid<T> {
    range: SigmaRange<T>,
    edges: Vec<T>,
    centers: Vec<T>,
    widths: Vec<T>,
    log_min: T,
    log_step: T,
}

impl<T: Real> LogGrid<T> {
    /// Builds `cells` equal-width cells in `log sigma`; centers are the
    /// geometric midpoints of their cells.
    pub fn new(range: SigmaRange<T>, cells: usize) -> Result<Self> {
        if cells < 2 {
            return Err(Error::Config(format!("log grid needs at least 2 cells, got {cells}")));
        }
        let log_min = range.min.ln();
        let log_step = (range.max.ln() - log_min) / T::count(cells);
        let mut edges: Vec<T> = (0..=cells).map(|k| (log_min + T::count(k) * log_step).exp()).collect();
        edges[0] = range.min;
        edges[cells] = range.max;
        let centers = edges.windows(2).map(|e| (e[0] * e[1]).sqrt()).collect();
        let widths = edges.windows(2).map(|e| e[1] - e[0]).collect();
        Ok(Self { range, edges, centers, widths, log_min, log_step })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    #[inline]
    pub fn range(&self) -> SigmaRange<T> {
        self.range
    }

    /// `K + 1` cell boundaries, strictly increasing.
    #[inline]
    pub fn edges(&self) -> &[T] {
        &self.edges
    }

    #[inline]
    pub fn centers(&self) -> &[T] {
        &self.centers
    }

    #[inline]
    pub fn widths(&self) -> &[T] {
        &self.widths
    }

    /// Width of every cell in `log sigma`.
    #[inline]
    pub fn log_step(&self) -> T {
        self.log_step
    }

    /// Half-open interval `[left, right)` of cell `k`.
    pub fn interval(&self, k: usize) -> (T, T) {
        (self.edges[k], self.edges[k + 1])
    }

    /// Index of the cell containing `sigma`. The right boundary `sigma_max`
    /// belongs to the last cell.
    pub fn locate(&self, sigma: T) -> Result<usize> {
        if !self.range.contains(sigma) {
            return Err(Error::Domain(format!("sigma {} outside [{}, {}]", sigma, self.range.min, self.range.max)));
        }
        let last = self.len() - 1;
        let raw = ((sigma.ln() - self.log_min) / self.log_step).floor();
        let mut k = raw.to_usize().unwrap_or(0).min(last);
        // log/exp rounding can put sigma one cell off near an edge
        while k > 0 && sigma < self.edges[k] {
            k -= 1;
        }
        while k < last && sigma >= self.edges[k + 1] {
            k += 1;
        }
        Ok(k)
    }
}

/// Values tabulated at the cell centers of a [`LogGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Profile<T> {
    grid: LogGrid<T>,
    values: Vec<T>,
}

impl<T: Real> Profile<T> {
    pub fn new(grid: LogGrid<T>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape { expected: grid.len(), got: values.len() });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("profile value at cell {k} is not finite")));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: LogGrid<T>, f: impl Fn(T) -> T) -> Result<Self> {
        let values = grid.centers().iter().map(|&s| f(s)).collect();
        Self::new(grid, values)
    }

    pub fn zeros(grid: LogGrid<T>) -> Self {
        let values = vec![T::zero(); grid.len()];
        Self { grid, values }
    }

    #[inline]
    pub fn grid(&self) -> &LogGrid<T> {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// `(sigma_k, value_k)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (T, T)> + '_ {
        self.grid.centers().iter().copied().zip(self.values.iter().copied())
    }

    /// Pointwise transform `value_k <- f(sigma_k, value_k)`.
    pub fn map(&self, f: impl Fn(T, T) -> T) -> Result<Self> {
        let values = self.iter().map(|(s, v)| f(s, v)).collect();
        Self::new(self.grid.clone(), values)
    }

    /// Trapezoid rule in `sigma` over the cell centers, extended to the range
    /// endpoints by constant extrapolation of the outermost values.
    pub fn integrate(&self) -> T {
        let c = self.grid.centers();
        let v = &self.values;
        let k = v.len();
        let range = self.grid.range();
        let mut total = v[0] * (c[0] - range.min()) + v[k - 1] * (range.max() - c[k - 1]);
        let half = T::lit(0.5);
        for i in 0..k - 1 {
            total = total + half * (v[i] + v[i + 1]) * (c[i + 1] - c[i]);
        }
        total
    }

    /// Index of the largest value (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = k;
            }
        }
        best
    }

    pub fn max_value(&self) -> T {
        self.values[self.argmax()]
    }
}

/// Normalized density over a [`LogGrid`].
///
/// `density[k]` is the point value at center `k` (trapezoid-normalized).
/// `cdf` has `K + 1` entries at the cell edges and accumulates the cell masses
/// `density[k] * width[k]`, renormalized so that `cdf[0] = 0` and `cdf[K] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedDensity<T> {
    grid: LogGrid<T>,
    density: Vec<T>,
    cdf: Vec<T>,
}

impl<T: Real> TabulatedDensity<T> {
    /// Normalizes a nonnegative profile into a density with its CDF.
    pub fn from_profile(profile: &Profile<T>) -> Result<Self> {
        if let Some(k) = profile.values().iter().position(|&v| v < T::zero()) {
            return Err(Error::Degenerate(format!("negative profile value at cell {k}")));
        }
        let total = profile.integrate();
        if !(total > T::zero()) || !total.is_finite() {
            return Err(Error::Degenerate("profile integrates to zero".into()));
        }
        let grid = profile.grid().clone();
        let density: Vec<T> = profile.values().iter().map(|&v| v / total).collect();
        let mut cdf = Vec::with_capacity(density.len() + 1);
        let mut acc = T::zero();
        cdf.push(acc);
        for (d, w) in density.iter().zip(grid.widths()) {
            acc = acc + *d * *w;
            cdf.push(acc);
        }
        let last = acc;
        for c in cdf.iter_mut() {
            *c = *c / last;
        }
        cdf[0] = T::zero();
        let k = density.len();
        cdf[k] = T::one();
        Ok(Self { grid, density, cdf })
    }

    /// Reassembles a density from stored arrays (e.g. a schedule file),
    /// validating shape and CDF monotonicity.
    pub fn from_parts(grid: LogGrid<T>, density: Vec<T>, cdf: Vec<T>) -> Result<Self> {
        let k = grid.len();
        if density.len() != k {
            return Err(Error::Shape { expected: k, got: density.len() });
        }
        if cdf.len() != k + 1 {
            return Err(Error::Shape { expected: k + 1, got: cdf.len() });
        }
        if density.iter().any(|d| !d.is_finite() || *d < T::zero()) {
            return Err(Error::Data("density values must be finite and nonnegative".into()));
        }
        if cdf[0] != T::zero() || cdf[k] != T::one() {
            return Err(Error::Data("cdf must start at 0 and end at 1".into()));
        }
        if cdf.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::Data("cdf must be nondecreasing".into()));
        }
        Ok(Self { grid, density, cdf })
    }

    #[inline]
    pub fn grid(&self) -> &LogGrid<T> {
        &self.grid
    }

    /// Point values at the cell centers.
    #[inline]
    pub fn density(&self) -> &[T] {
        &self.density
    }

    /// CDF at the `K + 1` cell edges.
    #[inline]
    pub fn cdf(&self) -> &[T] {
        &self.cdf
    }

    /// Probability mass of cell `k` under the sampling CDF.
    pub fn cell_mass(&self, k: usize) -> T {
        self.cdf[k + 1] - self.cdf[k]
    }

    /// Density values as a [`Profile`] on the same grid.
    pub fn to_profile(&self) -> Profile<T> {
        Profile { grid: self.grid.clone(), values: self.density.clone() }
    }

    /// CDF at an arbitrary in-range `sigma` (linear between edges).
    pub fn cdf_at(&self, sigma: T) -> Result<T> {
        let k = self.grid.locate(sigma)?;
        let (left, right) = self.grid.interval(k);
        let frac = ((sigma - left) / (right - left)).min(T::one());
        Ok(self.cdf[k] + frac * (self.cdf[k + 1] - self.cdf[k]))
    }

    /// Inverts the piecewise-linear CDF: returns `sigma` with `cdf(sigma) = z`.
    pub fn inverse_cdf(&self, z: T) -> Result<T> {
        if !(z >= T::zero() && z <= T::one()) {
            return Err(Error::Domain(format!("quantile {z} outside [0, 1]")));
        }
        let range = self.grid.range();
        if z == T::zero() {
            return Ok(range.min());
        }
        if z == T::one() {
            return Ok(range.max());
        }
        let j = self.cdf[1..].partition_point(|&c| c < z);
        let (c0, c1) = (self.cdf[j], self.cdf[j + 1]);
        let (left, right) = self.grid.interval(j);
        if c1 > c0 {
            let sigma = left + (z - c0) / (c1 - c0) * (right - left);
            Ok(sigma.max(left).min(right))
        } else {
            Ok(left)
        }
    }

    /// Draws one `sigma` by inverse-CDF sampling.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        let z = T::lit(rng.random::<f64>());
        self.inverse_cdf(z).expect("uniform draw lies in [0, 1)")
    }

    /// Density at `sigma`, interpolated linearly in `log sigma` between
    /// adjacent centers and held constant beyond the outermost centers.
    pub fn density_at(&self, sigma: T) -> Result<T> {
        if !self.grid.range().contains(sigma) {
            return Err(Error::Domain(format!("sigma {sigma} outside the grid range")));
        }
        let centers = self.grid.centers();
        let last = centers.len() - 1;
        if sigma <= centers[0] {
            return Ok(self.density[0]);
        }
        if sigma >= centers[last] {
            return Ok(self.density[last]);
        }
        let t = (sigma / centers[0]).ln() / self.grid.log_step();
        let k = t.floor().to_usize().unwrap_or(0).min(last - 1);
        let frac = (t - T::count(k)).max(T::zero()).min(T::one());
        Ok(self.density[k] + frac * (self.density[k + 1] - self.density[k]))
    }
}

impl<T: Real> TabulatedDensity<T> {
    /// Total-variation distance between the cell masses of two densities on
    /// the same grid.
    pub fn total_variation(&self, other: &Self) -> Result<T> {
        if self.grid.len() != other.grid.len() {
            return Err(Error::Shape { expected: self.grid.len(), got: other.grid.len() });
        }
        let sum: T = (0..self.grid.len()).map(|k| (self.cell_mass(k) - other.cell_mass(k)).abs()).sum();
        Ok(T::lit(0.5) * sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(min: f64, max: f64, k: usize) -> LogGrid<f64> {
        LogGrid::new(SigmaRange::new(min, max).unwrap(), k).unwrap()
    }

    #[test]
    fn two_cell_grid_on_two_decades() {
        let g = grid(1.0, 100.0, 2);
        assert_eq!(g.edges()[0], 1.0);
        assert!((g.edges()[1] - 10.0).abs() < 1e-12);
        assert_eq!(g.edges()[2], 100.0);
        assert!((g.centers()[0] - 10f64.powf(0.5)).abs() < 1e-12);
        assert!((g.centers()[1] - 10f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn default_grid_midpoint_edge() {
        let g = grid(0.002, 80.0, 128);
        assert!((g.edges()[64] - 0.4).abs() < 1e-12);
        let total: f64 = g.widths().iter().sum();
        assert!((total - (80.0 - 0.002)).abs() < 1e-10);
    }

    #[test]
    fn grid_rejects_bad_config() {
        assert!(SigmaRange::new(0.0, 1.0).is_err());
        assert!(SigmaRange::new(2.0, 1.0).is_err());
        assert!(SigmaRange::new(f64::NAN, 1.0).is_err());
        let r = SigmaRange::new(1.0, 2.0).unwrap();
        assert!(matches!(LogGrid::new(r, 1), Err(Error::Config(_))));
    }

    #[test]
    fn locate_boundaries() {
        let g = grid(1.0, 100.0, 2);
        assert_eq!(g.locate(1.0).unwrap(), 0);
        assert_eq!(g.locate(100.0).unwrap(), 1);
        assert_eq!(g.locate(5.0).unwrap(), 0);
        assert_eq!(g.locate(g.edges()[1]).unwrap(), 1);
        assert!(matches!(g.locate(0.5), Err(Error::Domain(_))));
        assert!(g.locate(100.0001).is_err());
    }

    #[test]
    fn integrate_constant_and_linear() {
        let g = grid(0.002, 80.0, 64);
        assert_eq!(Profile::zeros(g.clone()).integrate(), 0.0);
        let ones = Profile::from_fn(g, |_| 1.0).unwrap();
        assert!((ones.integrate() - (80.0 - 0.002)).abs() < 1e-10);

        let e = std::f64::consts::E;
        let lin = Profile::from_fn(grid(1.0, e, 512), |s| s).unwrap();
        let exact = (e * e - 1.0) / 2.0;
        assert!(((lin.integrate() - exact) / exact).abs() < 1e-3);
    }

    #[test]
    fn constant_profile_gives_uniform_density() {
        let g = grid(0.5, 4.0, 32);
        let d = TabulatedDensity::from_profile(&Profile::from_fn(g.clone(), |_| 3.0).unwrap()).unwrap();
        for &v in d.density() {
            assert!((v - 1.0 / 3.5).abs() < 1e-12);
        }
        for (c, e) in d.cdf().iter().zip(g.edges()) {
            assert!((c - (e - 0.5) / 3.5).abs() < 1e-12);
        }
        assert!((d.inverse_cdf(0.5).unwrap() - 2.25).abs() < 1e-12);
        assert!((d.density_at(1.7).unwrap() - 1.0 / 3.5).abs() < 1e-12);
    }

    #[test]
    fn single_cell_profile_is_a_single_ramp() {
        let g = grid(1.0, 10.0, 8);
        let mut v = vec![0.0; 8];
        v[3] = 2.0;
        let d = TabulatedDensity::from_profile(&Profile::new(g.clone(), v).unwrap()).unwrap();
        assert!(d.density().iter().enumerate().all(|(k, &x)| (k == 3) == (x > 0.0)));
        for k in 0..=3 {
            assert_eq!(d.cdf()[k], 0.0);
        }
        for k in 4..=8 {
            assert_eq!(d.cdf()[k], 1.0);
        }
        let (l, r) = g.interval(3);
        for z in [0.01, 0.3, 0.99] {
            let s = d.inverse_cdf(z).unwrap();
            assert!(s > l && s < r);
        }
    }

    #[test]
    fn normalize_rejects_degenerate_profiles() {
        let g = grid(1.0, 10.0, 8);
        assert!(matches!(TabulatedDensity::from_profile(&Profile::zeros(g.clone())), Err(Error::Degenerate(_))));
        let mut v = vec![1.0; 8];
        v[2] = -0.1;
        assert!(matches!(TabulatedDensity::from_profile(&Profile::new(g, v).unwrap()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn triangular_density_inverts_analytically() {
        // density 2 sigma on (0, 1]: cdf sigma^2, so z = 0.25 maps to 0.5
        let g = grid(1e-6, 1.0, 1024);
        let d = TabulatedDensity::from_profile(&Profile::from_fn(g, |s| 2.0 * s).unwrap()).unwrap();
        assert!((d.inverse_cdf(0.25).unwrap() - 0.5).abs() < 1e-3);
        assert_eq!(d.inverse_cdf(0.0).unwrap(), 1e-6);
        assert_eq!(d.inverse_cdf(1.0).unwrap(), 1.0);
        assert!(matches!(d.inverse_cdf(1.5), Err(Error::Domain(_))));
        assert!(d.inverse_cdf(-0.1).is_err());
    }

    #[test]
    fn density_interpolates_in_log_sigma() {
        let g = grid(1.0, 16.0, 4);
        let v = vec![1.0, 3.0, 5.0, 7.0];
        let d = TabulatedDensity::from_profile(&Profile::new(g.clone(), v).unwrap()).unwrap();
        let c = g.centers();
        for (&ck, &dk) in c.iter().zip(d.density()) {
            assert!((d.density_at(ck).unwrap() - dk).abs() < 1e-12);
        }
        let mid = (c[1] * c[2]).sqrt();
        let expect = 0.5 * (d.density()[1] + d.density()[2]);
        assert!((d.density_at(mid).unwrap() - expect).abs() < 1e-12);
        assert_eq!(d.density_at(1.0).unwrap(), d.density()[0]);
        assert_eq!(d.density_at(16.0).unwrap(), d.density()[3]);
        assert!(d.density_at(20.0).is_err());
    }

    #[test]
    fn draws_match_tabulated_cdf() {
        let g = grid(0.002, 80.0, 128);
        let p = Profile::from_fn(g, |s: f64| (-(s.ln() - 0.3f64.ln()).powi(2) / 0.5).exp()).unwrap();
        let d = TabulatedDensity::from_profile(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut draws: Vec<f64> = (0..100_000).map(|_| d.sample(&mut rng)).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = d.cdf_at(x).unwrap();
                ((i + 1) as f64 / n - f).max(f - i as f64 / n)
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS = {ks}");
    }

    #[test]
    fn f32_grid_locates_and_samples() {
        let g = LogGrid::<f32>::new(SigmaRange::new(0.002f32, 80.0).unwrap(), 64).unwrap();
        for &c in g.centers() {
            let k = g.locate(c).unwrap();
            let (l, r) = g.interval(k);
            assert!(l <= c && c < r);
        }
        let d = TabulatedDensity::from_profile(&Profile::from_fn(g, |s| 1.0 / s).unwrap()).unwrap();
        let s = d.inverse_cdf(0.5).unwrap();
        assert!((s - (0.002f32 * 80.0).sqrt()).abs() / s < 1e-3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn locate_is_cell_membership(frac in 0.0f64..=1.0, k in 2usize..300) {
                let g = grid(0.002, 80.0, k);
                let sigma = (0.002f64.ln() + frac * (80.0f64 / 0.002).ln()).exp().clamp(0.002, 80.0);
                let i = g.locate(sigma).unwrap();
                let (l, r) = g.interval(i);
                prop_assert!(l <= sigma);
                prop_assert!(sigma < r || (i == k - 1 && sigma == r));
            }

            #[test]
            fn density_invariants(values in proptest::collection::vec(0.0f64..10.0, 16), frac in 0.0f64..1.0) {
                prop_assume!(values.iter().any(|&v| v > 1e-3));
                let g = grid(0.01, 50.0, 16);
                let d = TabulatedDensity::from_profile(&Profile::new(g.clone(), values).unwrap()).unwrap();
                prop_assert!((d.to_profile().integrate() - 1.0).abs() < 1e-9);
                prop_assert!(d.cdf().windows(2).all(|w| w[1] >= w[0]));
                let sigma = g.range().min() + frac * g.range().width();
                let k = g.locate(sigma).unwrap();
                if d.cell_mass(k) > 0.0 {
                    let back = d.inverse_cdf(d.cdf_at(sigma).unwrap()).unwrap();
                    prop_assert!(((back - sigma) / sigma).abs() < 1e-10);
                }
            }
        }
    }
}
