//! Inference-time noise grids and a Heun probability-flow ODE sampler.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Profile, SigmaRange, TabulatedDensity};
use crate::oracle::{bayes_denoiser, Dataset, GaussianPrior};
use crate::scalar::Real;

/// Default exponent of the power-law reference grid.
pub const DEFAULT_RHO: f64 = 7.0;

/// Noise levels `sigma_0 > sigma_1 > ... > sigma_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceGrid<T> {
    nodes: Vec<T>,
}

impl<T: Real> InferenceGrid<T> {
    pub fn new(nodes: Vec<T>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Config(format!("a grid needs at least 2 nodes, got {}", nodes.len())));
        }
        if nodes.iter().any(|s| !(s.is_finite() && *s > T::zero())) {
            return Err(Error::Domain("grid nodes must be positive and finite".into()));
        }
        if let Some(i) = nodes.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::Domain(format!("grid nodes must strictly decrease (at index {})", i + 1)));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn sigma_max(&self) -> T {
        self.nodes[0]
    }

    pub fn sigma_min(&self) -> T {
        self.nodes[self.nodes.len() - 1]
    }
}

/// Denoiser evaluation contract: writes `x_hat(x, sigma)` into `out`.
pub trait Denoiser<T: Real> {
    fn denoise(&self, x: &[T], sigma: T, out: &mut [T]) -> Result<()>;
}

/// Adapts a closure to [`Denoiser`].
pub struct FnDenoiser<F>(pub F);

impl<T: Real, F: Fn(&[T], T, &mut [T])> Denoiser<T> for FnDenoiser<F> {
    fn denoise(&self, x: &[T], sigma: T, out: &mut [T]) -> Result<()> {
        (self.0)(x, sigma, out);
        Ok(())
    }
}

/// The empirical-Bayes optimal denoiser of a dataset.
impl<T: Real> Denoiser<T> for Dataset<T> {
    fn denoise(&self, x: &[T], sigma: T, out: &mut [T]) -> Result<()> {
        let mean = bayes_denoiser(self, x, sigma)?;
        out.copy_from_slice(&mean);
        Ok(())
    }
}

impl<T: Real> Denoiser<T> for GaussianPrior<T> {
    fn denoise(&self, x: &[T], sigma: T, out: &mut [T]) -> Result<()> {
        out.copy_from_slice(&GaussianPrior::denoise(self, x, sigma));
        Ok(())
    }
}

/// The information coordinate `u(sigma)`: normalized cumulative integral of
/// `sigma * r(sigma)` over the rate profile's grid.
pub fn info_coordinate<T: Real>(rate: &Profile<T>) -> Result<TabulatedDensity<T>> {
    if rate.values().iter().any(|&v| v < T::zero()) {
        return Err(Error::Domain("rate profile must be nonnegative".into()));
    }
    TabulatedDensity::from_profile(&rate.map(|s, r| s * r)?)
}

/// Nodes equally spaced in the information coordinate of `rate`, spanning
/// the rate profile's sigma range.
pub fn infogrid<T: Real>(rate: &Profile<T>, steps: usize) -> Result<InferenceGrid<T>> {
    if steps < 1 {
        return Err(Error::Config("infogrid needs at least one step".into()));
    }
    let u = info_coordinate(rate)?;
    let range = rate.grid().range();
    let n = T::count(steps);
    let mut nodes = Vec::with_capacity(steps + 1);
    nodes.push(range.max());
    for i in 1..steps {
        nodes.push(u.inverse_cdf(T::count(steps - i) / n)?);
    }
    nodes.push(range.min());
    InferenceGrid::new(nodes)
        .map_err(|_| Error::Degenerate("rate profile too concentrated to place distinct nodes".into()))
}

/// The conventional power-law grid
/// `sigma_i = (max^(1/rho) + i/N (min^(1/rho) - max^(1/rho)))^rho`.
pub fn reference_grid<T: Real>(steps: usize, range: SigmaRange<T>, rho_exp: T) -> Result<InferenceGrid<T>> {
    if steps < 1 {
        return Err(Error::Config("reference grid needs at least one step".into()));
    }
    if !(rho_exp >= T::one() && rho_exp.is_finite()) {
        return Err(Error::Config(format!("rho must be >= 1, got {rho_exp}")));
    }
    let inv = rho_exp.recip();
    let (hi, lo) = (range.max().powf(inv), range.min().powf(inv));
    let n = T::count(steps);
    let mut nodes: Vec<T> = (0..=steps).map(|i| (hi + T::count(i) / n * (lo - hi)).powf(rho_exp)).collect();
    nodes[0] = range.max();
    nodes[steps] = range.min();
    InferenceGrid::new(nodes)
}

/// Denoiser evaluations used by [`heun_sample`] on an `N`-step grid.
pub fn nfe(steps: usize) -> usize {
    2 * steps - 1
}

/// Integrates `dx/dsigma = (x - x_hat(x, sigma)) / sigma` from the first to
/// the last grid node. Every step takes a Heun corrector except the last,
/// which is plain Euler, for `2N - 1` denoiser calls in total.
pub fn heun_sample<T: Real, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    grid: &InferenceGrid<T>,
    x_init: &[T],
) -> Result<Vec<T>> {
    let dim = x_init.len();
    let mut x = x_init.to_vec();
    let mut x_hat = vec![T::zero(); dim];
    let mut d = vec![T::zero(); dim];
    let mut x_next = vec![T::zero(); dim];
    let nodes = grid.nodes();
    let steps = grid.steps();
    let eval = |x: &[T], sigma: T, out: &mut [T], step: usize| -> Result<()> {
        denoiser.denoise(x, sigma, out)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { step, msg: format!("non-finite denoiser output at sigma = {sigma}") });
        }
        Ok(())
    };
    for i in 0..steps {
        let (s, s_next) = (nodes[i], nodes[i + 1]);
        let h = s_next - s;
        eval(&x, s, &mut x_hat, i)?;
        for j in 0..dim {
            d[j] = (x[j] - x_hat[j]) / s;
            x_next[j] = x[j] + h * d[j];
        }
        if i + 1 < steps {
            eval(&x_next, s_next, &mut x_hat, i)?;
            let half = T::lit(0.5);
            for j in 0..dim {
                let d_next = (x_next[j] - x_hat[j]) / s_next;
                x_next[j] = x[j] + h * half * (d[j] + d_next);
            }
        }
        std::mem::swap(&mut x, &mut x_next);
    }
    Ok(x)
}

/// [`heun_sample`] over many initial points in parallel; output order
/// matches input order.
pub fn heun_sample_many<T: Real, D: Denoiser<T> + Sync + ?Sized>(
    denoiser: &D,
    grid: &InferenceGrid<T>,
    inits: &[Vec<T>],
) -> Result<Vec<Vec<T>>> {
    inits.par_iter().map(|x| heun_sample(denoiser, grid, x)).collect()
}

/// `max_i |u(sigma_i) - u(sigma_{i+1}) - 1/N|` under the rate's information
/// coordinate.
pub fn grid_uniformity<T: Real>(grid: &InferenceGrid<T>, rate: &Profile<T>) -> Result<T> {
    let u = info_coordinate(rate)?;
    let range = rate.grid().range();
    let u_at = |s: T| u.cdf_at(s.max(range.min()).min(range.max()));
    let target = T::count(grid.steps()).recip();
    let mut worst = T::zero();
    for w in grid.nodes().windows(2) {
        worst = worst.max((u_at(w[0])? - u_at(w[1])? - target).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::LogGrid;
    use crate::oracle::score;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(lo: f64, hi: f64, k: usize) -> LogGrid<f64> {
        LogGrid::new(SigmaRange::new(lo, hi).unwrap(), k).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(InferenceGrid::new(vec![1.0]).is_err());
        assert!(InferenceGrid::new(vec![1.0, 1.0]).is_err());
        assert!(InferenceGrid::new(vec![1.0, 0.0]).is_err());
        let g = InferenceGrid::new(vec![3.0, 2.0, 1.0]).unwrap();
        assert_eq!((g.steps(), g.sigma_max(), g.sigma_min()), (2, 3.0, 1.0));
    }

    #[test]
    fn inverse_sigma_rate_gives_uniform_nodes() {
        let rate = Profile::from_fn(grid(0.1, 10.0, 128), |s| 1.0 / s).unwrap();
        let g = infogrid(&rate, 10).unwrap();
        for (i, &s) in g.nodes().iter().enumerate() {
            let expected = 10.0 - i as f64 * 9.9 / 10.0;
            assert!((s - expected).abs() < 1e-9, "node {i}: {s} vs {expected}");
        }
    }

    #[test]
    fn inverse_square_rate_gives_geometric_nodes() {
        let rate = Profile::from_fn(grid(0.002, 80.0, 128), |s| 1.0 / (s * s)).unwrap();
        // 16 steps divide 128 cells, so every node falls on a grid edge
        let g = infogrid(&rate, 16).unwrap();
        let ratio = (0.002f64 / 80.0).powf(1.0 / 16.0);
        for (i, &s) in g.nodes().iter().enumerate() {
            let expected = 80.0 * ratio.powi(i as i32);
            assert!(((s - expected) / expected).abs() < 1e-9);
        }
        // off-edge levels are still geometric to within a cell's curvature
        let g = infogrid(&rate, 7).unwrap();
        let ratio = (0.002f64 / 80.0).powf(1.0 / 7.0);
        for (i, &s) in g.nodes().iter().enumerate() {
            let expected = 80.0 * ratio.powi(i as i32);
            assert!(((s - expected) / expected).abs() < 2e-3);
        }
    }

    #[test]
    fn single_step_grid_is_the_range() {
        let rate = Profile::from_fn(grid(0.002, 80.0, 32), |s| (-s).exp()).unwrap();
        let g = infogrid(&rate, 1).unwrap();
        assert_eq!(g.nodes(), &[80.0, 0.002]);
        assert!(grid_uniformity(&g, &rate).unwrap() < 1e-15);
        assert!(infogrid(&rate, 0).is_err());
        assert!(infogrid(&Profile::zeros(grid(0.1, 1.0, 4)), 4).is_err());
    }

    #[test]
    fn infogrid_is_uniform_in_u_and_reference_is_not() {
        let rate = Profile::from_fn(grid(0.002, 80.0, 128), |s| {
            let l = (s / 0.5).ln();
            (-l * l).exp() / s
        })
        .unwrap();
        let info = infogrid(&rate, 18).unwrap();
        assert!(grid_uniformity(&info, &rate).unwrap() <= 1e-6);
        let reference = reference_grid(18, SigmaRange::new(0.002, 80.0).unwrap(), DEFAULT_RHO).unwrap();
        assert!(grid_uniformity(&reference, &rate).unwrap() > 1e-3);
    }

    #[test]
    fn reference_grid_formula() {
        let range = SigmaRange::new(0.002, 80.0).unwrap();
        let g = reference_grid(18, range, 7.0).unwrap();
        assert_eq!(g.nodes().len(), 19);
        assert_eq!((g.sigma_max(), g.sigma_min()), (80.0, 0.002));
        let node9 = (80f64.powf(1.0 / 7.0) + 0.5 * (0.002f64.powf(1.0 / 7.0) - 80f64.powf(1.0 / 7.0))).powi(7);
        assert!((g.nodes()[9] - node9).abs() < 1e-12 * node9);
        assert_eq!(nfe(18), 35);
        assert_eq!(nfe(40), 79);

        let lin = reference_grid(4, SigmaRange::new(1.0, 5.0).unwrap(), 1.0).unwrap();
        assert_eq!(lin.nodes(), &[5.0, 4.0, 3.0, 2.0, 1.0]);
        assert!(reference_grid(4, range, 0.5).is_err());
        assert!(reference_grid(0, range, 7.0).is_err());
    }

    #[test]
    fn identity_denoiser_is_a_fixed_point() {
        let g = reference_grid(10, SigmaRange::new(0.01, 10.0).unwrap(), 7.0).unwrap();
        let id = FnDenoiser(|x: &[f64], _s: f64, out: &mut [f64]| out.copy_from_slice(x));
        let x0 = vec![0.3, -2.0, 7.5];
        assert_eq!(heun_sample(&id, &g, &x0).unwrap(), x0);
    }

    #[test]
    fn denoiser_call_count() {
        use std::cell::Cell;
        struct Counting(Cell<usize>);
        impl Denoiser<f64> for Counting {
            fn denoise(&self, x: &[f64], _s: f64, out: &mut [f64]) -> Result<()> {
                self.0.set(self.0.get() + 1);
                out.copy_from_slice(x);
                Ok(())
            }
        }
        for n in [1, 2, 18, 40] {
            let c = Counting(Cell::new(0));
            let g = reference_grid(n, SigmaRange::new(0.002, 80.0).unwrap(), 7.0).unwrap();
            heun_sample(&c, &g, &[1.0]).unwrap();
            assert_eq!(c.0.get(), nfe(n));
        }
    }

    #[test]
    fn nonfinite_output_reports_step() {
        let g = reference_grid(5, SigmaRange::new(0.01, 10.0).unwrap(), 7.0).unwrap();
        let bad = FnDenoiser(|x: &[f64], s: f64, out: &mut [f64]| {
            out[0] = if s < 1.0 { f64::NAN } else { x[0] };
        });
        match heun_sample(&bad, &g, &[1.0]) {
            Err(Error::Integration { step, .. }) => assert!(step > 0 && step < 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn heun_is_second_order() {
        // x_hat = s^2 x / (s^2 + sigma^2) makes the ODE linear with solution
        // x(sigma) = x_max sqrt((s^2 + sigma^2) / (s^2 + sigma_max^2))
        let prior = GaussianPrior::new(1.0, 1).unwrap();
        let range = SigmaRange::new(0.002, 80.0).unwrap();
        let x_max = 80.0;
        let exact = x_max * ((1.0 + 0.002f64.powi(2)) / (1.0 + 80.0f64.powi(2))).sqrt();
        let err = |n: usize| {
            let g = reference_grid(n, range, DEFAULT_RHO).unwrap();
            (heun_sample(&prior, &g, &[x_max]).unwrap()[0] - exact).abs()
        };
        for n in [8, 16, 32] {
            let ratio = err(n) / err(2 * n);
            assert!((3.0..=5.0).contains(&ratio), "n = {n}: ratio {ratio}");
        }
    }

    #[test]
    fn drift_matches_score() {
        let d = Dataset::from_rows(&[vec![1.0, 0.5], vec![-0.3, 2.0], vec![0.0, -1.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut out = vec![0.0; 2];
        for _ in 0..50 {
            let sigma = 10f64.powf(rng.random_range(-1.0..1.0));
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            d.denoise(&x, sigma, &mut out).unwrap();
            let sc = score(&d, &x, sigma).unwrap();
            for j in 0..2 {
                let drift = (x[j] - out[j]) / sigma;
                assert!((drift + sigma * sc[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_batch_matches_serial() {
        let d = Dataset::two_point(1.0);
        let g = reference_grid(6, SigmaRange::new(0.01, 10.0).unwrap(), 7.0).unwrap();
        let inits: Vec<Vec<f64>> = (0..16).map(|i| vec![i as f64 - 8.0]).collect();
        let batch = heun_sample_many(&d, &g, &inits).unwrap();
        for (x0, x) in inits.iter().zip(&batch) {
            assert_eq!(&heun_sample(&d, &g, x0).unwrap(), x);
        }
    }

    #[test]
    fn fuzzed_infogrids_are_monotone_and_pinned() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = grid(0.002, 80.0, 64);
        for _ in 0..100 {
            let values: Vec<f64> = (0..64)
                .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>().powi(3) * 10.0 })
                .collect();
            let rate = Profile::new(g.clone(), values).unwrap();
            if rate.values().iter().all(|&v| v == 0.0) {
                continue;
            }
            let steps = rng.random_range(1..30);
            // sparse profiles may leave too little mass to separate nodes;
            // when a grid is produced it must satisfy the invariants
            if let Ok(ig) = infogrid(&rate, steps) {
                assert_eq!(ig.sigma_max(), 80.0);
                assert_eq!(ig.sigma_min(), 0.002);
                assert!(ig.nodes().windows(2).all(|w| w[1] < w[0]));
                assert!(grid_uniformity(&ig, &rate).unwrap() <= 1e-6);
            }
        }
    }
}
