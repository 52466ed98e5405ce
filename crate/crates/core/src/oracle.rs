//! Exact Bayes-optimal denoising under the empirical prior of a finite dataset,
//! and a closed-form Gaussian-prior reference.
//!
//! For `x = x0 + sigma * eps` with `x0` uniform over the dataset atoms, the
//! posterior over atoms is a softmax of `-|x - x_i|^2 / (2 sigma^2)`. The
//! posterior mean is the Bayes denoiser, its trace covariance is the
//! conditional MSE, and the score follows from Tweedie's formula.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{LogGrid, Profile};
use crate::rng::{fill_normal, indexed_substream, Stream};
use crate::scalar::{log_sum_exp, Real};

/// `N` samples in `d` dimensions, stored row-major with cached squared norms.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    dim: usize,
    data: Vec<T>,
    sq_norms: Vec<T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dataset dimension must be at least 1".into()));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape { expected: dim, got: data.len() % dim });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        let sq_norms = data.chunks(dim).map(|r| dot(r, r)).collect();
        Ok(Self { dim, data, sq_norms })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Data(format!("row {i} has {} values, expected {dim}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    /// Atoms at `-a` and `+a` in one dimension.
    pub fn two_point(a: T) -> Self {
        Self::new(1, vec![-a, a]).expect("two finite atoms")
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.sq_norms.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.sq_norms.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.dim)
    }

    #[inline]
    pub fn sq_norm(&self, i: usize) -> T {
        self.sq_norms[i]
    }

    pub fn mean(&self) -> Vec<T> {
        let mut m = vec![T::zero(); self.dim];
        for r in self.rows() {
            for (a, &b) in m.iter_mut().zip(r) {
                *a = *a + b;
            }
        }
        let n = T::count(self.len());
        m.iter_mut().for_each(|v| *v = *v / n);
        m
    }

    /// `sum_i |x_i - mean|^2 / N`, the large-noise limit of the MMSE.
    pub fn total_variance(&self) -> T {
        let m = self.mean();
        self.rows().map(|r| sq_dist_direct(r, &m)).sum::<T>() / T::count(self.len())
    }

    pub fn max_pairwise_sq_dist(&self) -> T {
        let mut best = T::zero();
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                best = best.max(sq_dist_direct(self.row(i), self.row(j)));
            }
        }
        best
    }

    /// `|x - x_i|^2` via `|x|^2 + |x_i|^2 - 2 x.x_i`, switching to the direct
    /// sum when the expansion cancels more than six digits.
    #[inline]
    fn sq_dist(&self, x: &[T], x_sq: T, i: usize) -> T {
        let row = self.row(i);
        let scale = x_sq + self.sq_norms[i];
        let expanded = scale - T::lit(2.0) * dot(x, row);
        if expanded < T::lit(1e-6) * scale {
            sq_dist_direct(x, row)
        } else {
            expanded
        }
    }

    fn check_query(&self, x: &[T], sigma: T) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape { expected: self.dim, got: x.len() });
        }
        if !(sigma > T::zero() && sigma.is_finite()) {
            return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
        }
        Ok(())
    }

    /// Log posterior weights `log softmax_i(-|x - x_i|^2 / (2 sigma^2))` and
    /// the log-sum-exp normalizer of the unnormalized logits.
    fn log_weights(&self, x: &[T], sigma: T, logits: &mut Vec<T>) -> T {
        let x_sq = dot(x, x);
        let inv = T::one() / (T::lit(2.0) * sigma * sigma);
        logits.clear();
        logits.extend((0..self.len()).map(|i| -self.sq_dist(x, x_sq, i) * inv));
        let lse = log_sum_exp(logits);
        logits.iter_mut().for_each(|l| *l = *l - lse);
        lse
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
fn sq_dist_direct<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Posterior summary at one `(x, sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats<T> {
    pub weights: Vec<T>,
    pub mean: Vec<T>,
    pub trace_cov: T,
}

/// Reusable buffers for repeated posterior evaluations.
#[derive(Debug, Default, Clone)]
struct Scratch<T> {
    logits: Vec<T>,
    mean: Vec<T>,
}

impl<T: Real> Scratch<T> {
    /// Fills `logits` with weights and `mean` with the posterior mean; returns
    /// the trace covariance.
    fn trace_cov(&mut self, data: &Dataset<T>, x: &[T], sigma: T) -> T {
        data.log_weights(x, sigma, &mut self.logits);
        self.logits.iter_mut().for_each(|l| *l = l.exp());
        self.mean.clear();
        self.mean.resize(data.dim(), T::zero());
        for (i, &w) in self.logits.iter().enumerate() {
            for (m, &v) in self.mean.iter_mut().zip(data.row(i)) {
                *m = *m + w * v;
            }
        }
        self.logits.iter().enumerate().map(|(i, &w)| w * sq_dist_direct(data.row(i), &self.mean)).sum()
    }
}

/// Full posterior at `(x, sigma)`.
pub fn posterior<T: Real>(data: &Dataset<T>, x: &[T], sigma: T) -> Result<PosteriorStats<T>> {
    data.check_query(x, sigma)?;
    let mut s = Scratch::default();
    let trace_cov = s.trace_cov(data, x, sigma);
    Ok(PosteriorStats { weights: s.logits, mean: s.mean, trace_cov })
}

/// Posterior weights over the atoms (a point on the simplex).
pub fn posterior_weights<T: Real>(data: &Dataset<T>, x: &[T], sigma: T) -> Result<Vec<T>> {
    data.check_query(x, sigma)?;
    let mut logits = Vec::new();
    data.log_weights(x, sigma, &mut logits);
    Ok(logits.into_iter().map(T::exp).collect())
}

/// Posterior mean `E[x0 | x_sigma = x]`.
pub fn bayes_denoiser<T: Real>(data: &Dataset<T>, x: &[T], sigma: T) -> Result<Vec<T>> {
    posterior(data, x, sigma).map(|p| p.mean)
}

/// `tr Cov[x0 | x_sigma = x]`, the conditional MSE of the Bayes denoiser.
pub fn posterior_trace_cov<T: Real>(data: &Dataset<T>, x: &[T], sigma: T) -> Result<T> {
    posterior(data, x, sigma).map(|p| p.trace_cov)
}

/// Log-density of the noisy marginal `(1/N) sum_i N(x; x_i, sigma^2 I)`.
pub fn log_density<T: Real>(data: &Dataset<T>, x: &[T], sigma: T) -> Result<T> {
    data.check_query(x, sigma)?;
    let mut logits = Vec::new();
    let lse = data.log_weights(x, sigma, &mut logits);
    let d = T::count(data.dim());
    let two_pi_var = T::lit(2.0) * T::PI() * sigma * sigma;
    Ok(-T::lit(0.5) * d * two_pi_var.ln() + lse - T::count(data.len()).ln())
}

/// Score `grad_x log p(x; sigma) = (denoiser(x) - x) / sigma^2`.
pub fn score<T: Real>(data: &Dataset<T>, x: &[T], sigma: T) -> Result<Vec<T>> {
    let mean = bayes_denoiser(data, x, sigma)?;
    let var = sigma * sigma;
    Ok(mean.iter().zip(x).map(|(&m, &xi)| (m - xi) / var).collect())
}

/// One stochastic oracle loss: draws `x0` uniformly over the atoms, forms
/// `x = x0 + sigma * eps` and returns `tr Cov[x0 | x]`.
pub fn sample_oracle_loss<T: Real, R: Rng + ?Sized>(data: &Dataset<T>, sigma: T, rng: &mut R) -> Result<T> {
    let mut x = vec![T::zero(); data.dim()];
    let mut s = Scratch::default();
    oracle_loss_into(data, sigma, rng, &mut x, &mut s)
}

fn oracle_loss_into<T: Real, R: Rng + ?Sized>(
    data: &Dataset<T>,
    sigma: T,
    rng: &mut R,
    x: &mut [T],
    scratch: &mut Scratch<T>,
) -> Result<T> {
    if !(sigma > T::zero() && sigma.is_finite()) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let i = rng.random_range(0..data.len());
    fill_normal(rng, x);
    for (v, &a) in x.iter_mut().zip(data.row(i)) {
        *v = a + sigma * *v;
    }
    Ok(scratch.trace_cov(data, x, sigma))
}

/// Monte-Carlo MMSE at every grid center.
///
/// Each cell averages `n_mc` oracle losses drawn from its own substream of
/// `seed`, so the result is deterministic and cells are evaluated in parallel.
pub fn mmse_profile<T: Real>(data: &Dataset<T>, grid: &LogGrid<T>, n_mc: usize, seed: u64) -> Result<Profile<T>> {
    if n_mc == 0 {
        return Err(Error::Config("n_mc must be at least 1".into()));
    }
    let values = grid
        .centers()
        .par_iter()
        .enumerate()
        .map(|(k, &sigma)| {
            let mut rng = indexed_substream(seed, Stream::ProfileMc, k as u32);
            let mut x = vec![T::zero(); data.dim()];
            let mut scratch = Scratch::default();
            let mut acc = T::zero();
            for _ in 0..n_mc {
                acc = acc + oracle_loss_into(data, sigma, &mut rng, &mut x, &mut scratch)?;
            }
            Ok(acc / T::count(n_mc))
        })
        .collect::<Result<Vec<T>>>()?;
    Profile::new(grid.clone(), values)
}

/// Conditional-entropy rate `mmse(sigma) / sigma^3` at every grid center.
pub fn entropy_rate_profile<T: Real>(mmse: &Profile<T>) -> Profile<T> {
    mmse.map(|s, m| m / (s * s * s)).expect("rate of a finite profile is finite")
}

/// Entropy rate with respect to log-SNR: `mmse / (2 sigma^2)`, i.e.
/// `sigma / 2` times the sigma-rate.
pub fn entropy_rate_logsnr<T: Real>(mmse: T, sigma: T) -> Result<T> {
    if !(sigma > T::zero()) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    Ok(T::lit(0.5) * mmse / (sigma * sigma))
}

/// Isotropic Gaussian prior `N(0, s^2 I_d)`, used as a closed-form reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrior<T> {
    pub s: T,
    pub dim: usize,
}

impl<T: Real> GaussianPrior<T> {
    pub fn new(s: T, dim: usize) -> Result<Self> {
        if !(s > T::zero()) || dim == 0 {
            return Err(Error::Config(format!("gaussian prior needs s > 0 and d >= 1 (s = {s}, d = {dim})")));
        }
        Ok(Self { s, dim })
    }

    /// Posterior mean `s^2 x / (s^2 + sigma^2)`.
    pub fn denoise(&self, x: &[T], sigma: T) -> Vec<T> {
        let s2 = self.s * self.s;
        let shrink = s2 / (s2 + sigma * sigma);
        x.iter().map(|&v| shrink * v).collect()
    }
}

fn check_sigma<T: Real>(sigma: T) -> Result<()> {
    if sigma > T::zero() && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("sigma must be positive, got {sigma}")))
    }
}

/// `d s^2 sigma^2 / (s^2 + sigma^2)`.
pub fn gaussian_mmse<T: Real>(prior: &GaussianPrior<T>, sigma: T) -> Result<T> {
    check_sigma(sigma)?;
    let (s2, v) = (prior.s * prior.s, sigma * sigma);
    Ok(T::count(prior.dim) * s2 * v / (s2 + v))
}

/// `(d/2) log(2 pi e s^2 sigma^2 / (s^2 + sigma^2))`.
pub fn gaussian_cond_entropy<T: Real>(prior: &GaussianPrior<T>, sigma: T) -> Result<T> {
    check_sigma(sigma)?;
    let (s2, v) = (prior.s * prior.s, sigma * sigma);
    let post_var = s2 * v / (s2 + v);
    let two_pi_e = T::lit(2.0) * T::PI() * T::E();
    Ok(T::lit(0.5) * T::count(prior.dim) * (two_pi_e * post_var).ln())
}
