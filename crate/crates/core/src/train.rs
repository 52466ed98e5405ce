//! A small MLP denoiser with hand-written backpropagation, and the training
//! loop that feeds per-item losses to a [`NoiseSource`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocate::Weighting;
use crate::error::{Error, Result};
use crate::infer::Denoiser;
use crate::oracle::Dataset;
use crate::rng::{normal, substream, Stream};
use crate::scalar::Real;
use crate::scheduler::{NoiseSource, RefreshRecord, Scheduler};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Fully connected network with tanh hidden layers and a linear output layer.
///
/// Parameters are stored flat, layer by layer: the weight matrix (row-major,
/// `out x in`) followed by the bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    layer_sizes: Vec<usize>,
    params: Vec<T>,
}

impl<T: Real> Network<T> {
    /// Weights are drawn from `N(0, 1/fan_in)`, biases start at zero;
    /// `zero_final` zeroes the output layer's weights.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], zero_final: bool, rng: &mut R) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {layer_sizes:?}")));
        }
        let mut params = Vec::with_capacity(param_count(layer_sizes));
        let last = layer_sizes.len() - 2;
        for (l, w) in layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = T::count(fan_in).sqrt().recip();
            for _ in 0..fan_in * fan_out {
                let v: T = normal(rng);
                params.push(if zero_final && l == last { T::zero() } else { v * scale });
            }
            params.extend(std::iter::repeat_n(T::zero(), fan_out));
        }
        Ok(Self { layer_sizes: layer_sizes.to_vec(), params })
    }

    pub fn from_params(layer_sizes: Vec<usize>, params: Vec<T>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {layer_sizes:?}")));
        }
        let expected = param_count(&layer_sizes);
        if params.len() != expected {
            return Err(Error::Shape { expected, got: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Data("non-finite parameter".into()));
        }
        Ok(Self { layer_sizes, params })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 1]
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        let mut acts = self.activations(input.to_vec())?;
        Ok(acts.pop().expect("at least one layer"))
    }

    /// The input plus the output of every layer.
    fn activations(&self, input: Vec<T>) -> Result<Vec<Vec<T>>> {
        if input.len() != self.input_width() {
            return Err(Error::Shape { expected: self.input_width(), got: input.len() });
        }
        let n_layers = self.layer_sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input);
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let bias = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let prev = &acts[l];
            let hidden = l + 1 < n_layers;
            let out: Vec<T> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    let z = row.iter().zip(prev).fold(bias[o], |acc, (&w, &h)| acc + w * h);
                    if hidden {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        Ok(acts)
    }

    /// Adds `d objective / d params` for one item, given `d objective / d output`.
    fn backward(&self, acts: &[Vec<T>], mut delta: Vec<T>, grad: &mut [T]) {
        let n_layers = self.layer_sizes.len() - 1;
        let mut offset = self.params.len();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            offset -= n_in * n_out + n_out;
            let h = &acts[l];
            for o in 0..n_out {
                let row = &mut grad[offset + o * n_in..offset + (o + 1) * n_in];
                for (g, &hi) in row.iter_mut().zip(h) {
                    *g = *g + delta[o] * hi;
                }
                grad[offset + n_in * n_out + o] = grad[offset + n_in * n_out + o] + delta[o];
            }
            if l == 0 {
                break;
            }
            let weights = &self.params[offset..offset + n_in * n_out];
            delta = (0..n_in)
                .map(|i| {
                    let back = (0..n_out).fold(T::zero(), |acc, o| acc + weights[o * n_in + i] * delta[o]);
                    back * (T::one() - h[i] * h[i])
                })
                .collect();
        }
    }

    /// `sum_i coef_i |f(input_i) - target_i|^2` and its gradient; also
    /// returns the unscaled squared errors.
    pub fn weighted_sq_error(&self, items: &[(Vec<T>, &[T], T)]) -> Result<LossGrad<T>> {
        let mut grad = vec![T::zero(); self.params.len()];
        let mut per_item = Vec::with_capacity(items.len());
        let mut objective = T::zero();
        let two = T::lit(2.0);
        for (input, target, coef) in items {
            if target.len() != self.output_width() {
                return Err(Error::Shape { expected: self.output_width(), got: target.len() });
            }
            let acts = self.activations(input.clone())?;
            let out = &acts[acts.len() - 1];
            let loss = out.iter().zip(*target).fold(T::zero(), |acc, (&o, &x)| acc + (o - x) * (o - x));
            objective = objective + *coef * loss;
            per_item.push(loss);
            let delta = out.iter().zip(*target).map(|(&o, &x)| *coef * two * (o - x)).collect();
            self.backward(&acts, delta, &mut grad);
        }
        Ok(LossGrad { objective, per_item, grad })
    }
}

/// How the raw network output is turned into a denoised estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preconditioning<T> {
    /// `x_hat = f([x, ln sigma])`.
    None,
    /// `x_hat = c_skip x + c_out f([c_in x, ln sigma])` with the usual
    /// variance-preserving coefficients for data scale `sigma_data`. The skip
    /// path makes the low-noise error scale like `sigma^2`.
    Edm { sigma_data: T },
}

impl<T: Real> Preconditioning<T> {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Preconditioning::Edm { sigma_data } if !(sigma_data > T::zero() && sigma_data.is_finite()) => {
                Err(Error::Config(format!("sigma_data must be positive, got {sigma_data}")))
            }
            _ => Ok(()),
        }
    }

    /// `(c_skip, c_out, c_in)` at `sigma`.
    pub fn coefficients(&self, sigma: T) -> (T, T, T) {
        match *self {
            Preconditioning::None => (T::zero(), T::one(), T::one()),
            Preconditioning::Edm { sigma_data: sd } => {
                let total = sigma * sigma + sd * sd;
                let root = total.sqrt();
                (sd * sd / total, sigma * sd / root, root.recip())
            }
        }
    }
}

/// Denoiser over a [`Network`] whose input is the (scaled) data point plus
/// `ln sigma`, so it is one wider than its output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser<T> {
    net: Network<T>,
    precond: Preconditioning<T>,
}

impl<T: Real> MlpDenoiser<T> {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        hidden: &[usize],
        precond: Preconditioning<T>,
        zero_final: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("data dimension must be positive".into()));
        }
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(dim + 1);
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        Self::from_network(Network::new(&sizes, zero_final, rng)?, precond)
    }

    pub fn from_network(net: Network<T>, precond: Preconditioning<T>) -> Result<Self> {
        if net.input_width() != net.output_width() + 1 {
            return Err(Error::Config(format!(
                "input width must be output width + 1 (for ln sigma), got {:?}",
                net.layer_sizes()
            )));
        }
        precond.validate()?;
        Ok(Self { net, precond })
    }

    pub fn from_params(layer_sizes: Vec<usize>, params: Vec<T>, precond: Preconditioning<T>) -> Result<Self> {
        Self::from_network(Network::from_params(layer_sizes, params)?, precond)
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn preconditioning(&self) -> &Preconditioning<T> {
        &self.precond
    }

    pub fn layer_sizes(&self) -> &[usize] {
        self.net.layer_sizes()
    }

    pub fn params(&self) -> &[T] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        self.net.params_mut()
    }

    /// Data dimension.
    pub fn dim(&self) -> usize {
        self.net.output_width()
    }

    fn input(&self, x: &[T], sigma: T, c_in: T) -> Result<Vec<T>> {
        if x.len() != self.dim() {
            return Err(Error::Shape { expected: self.dim(), got: x.len() });
        }
        let mut input = Vec::with_capacity(x.len() + 1);
        input.extend(x.iter().map(|&v| c_in * v));
        input.push(sigma.ln());
        Ok(input)
    }

    fn check_sigma(sigma: T) -> Result<()> {
        if sigma > T::zero() && sigma.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!("sigma must be positive and finite, got {sigma}")))
        }
    }

    pub fn forward(&self, x: &[T], sigma: T) -> Result<Vec<T>> {
        Self::check_sigma(sigma)?;
        let (c_skip, c_out, c_in) = self.precond.coefficients(sigma);
        let raw = self.net.forward(&self.input(x, sigma, c_in)?)?;
        Ok(raw.iter().zip(x).map(|(&f, &v)| c_skip * v + c_out * f).collect())
    }

    /// Objective `mean_i w(sigma_i) l_i` and its gradient, where
    /// `l_i = |x0_i - x_hat(x0_i + sigma_i eps_i, sigma_i)|^2`.
    pub fn loss_and_grad(&self, batch: &[BatchItem<'_, T>], w: &Weighting<T>) -> Result<LossGrad<T>> {
        self.loss_and_grad_with(batch, |s| w.eval(s))
    }

    pub fn loss_and_grad_with(&self, batch: &[BatchItem<'_, T>], weight: impl Fn(T) -> T) -> Result<LossGrad<T>> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let n = T::count(batch.len());
        let two = T::lit(2.0);
        let mut grad = vec![T::zero(); self.params().len()];
        let mut per_item = Vec::with_capacity(batch.len());
        let mut objective = T::zero();
        for item in batch {
            if item.eps.len() != item.x0.len() {
                return Err(Error::Shape { expected: item.x0.len(), got: item.eps.len() });
            }
            Self::check_sigma(item.sigma)?;
            let noisy: Vec<T> = item.x0.iter().zip(item.eps).map(|(&x, &e)| x + item.sigma * e).collect();
            let (c_skip, c_out, c_in) = self.precond.coefficients(item.sigma);
            let acts = self.net.activations(self.input(&noisy, item.sigma, c_in)?)?;
            let raw = &acts[acts.len() - 1];
            let residual: Vec<T> =
                raw.iter().zip(&noisy).zip(item.x0).map(|((&f, &v), &x)| c_skip * v + c_out * f - x).collect();
            let loss = residual.iter().fold(T::zero(), |acc, &r| acc + r * r);
            let coef = weight(item.sigma) / n;
            objective = objective + coef * loss;
            per_item.push(loss);
            let delta = residual.iter().map(|&r| coef * two * c_out * r).collect();
            self.net.backward(&acts, delta, &mut grad);
        }
        Ok(LossGrad { objective, per_item, grad })
    }
}

fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<T: Real> Denoiser<T> for MlpDenoiser<T> {
    fn denoise(&self, x: &[T], sigma: T, out: &mut [T]) -> Result<()> {
        out.copy_from_slice(&self.forward(x, sigma)?);
        Ok(())
    }
}

/// One training example: clean point, noise level and standard-normal noise.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a, T> {
    pub x0: &'a [T],
    pub sigma: T,
    pub eps: &'a [T],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    /// Weighted batch objective.
    pub objective: T,
    /// Unweighted squared errors, one per item.
    pub per_item: Vec<T>,
    pub grad: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer<T> {
    Sgd,
    Momentum { momentum: T },
}

impl<T: Real> Default for Optimizer<T> {
    fn default() -> Self {
        Optimizer::Momentum { momentum: T::lit(0.9) }
    }
}

/// Heavy-ball state: `v <- mu v + g; theta <- theta - lr v`.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    velocity: Vec<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(n_params: usize) -> Self {
        Self { velocity: vec![T::zero(); n_params] }
    }

    pub fn step(&mut self, opt: &Optimizer<T>, lr: T, params: &mut [T], grad: &[T]) {
        match *opt {
            Optimizer::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p = *p - lr * g;
                }
            }
            Optimizer::Momentum { momentum } => {
                for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
                    *v = momentum * *v + g;
                    *p = *p - lr * *v;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(serialize = "T: Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct TrainConfig<T> {
    pub lr: T,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: Optimizer<T>,
    pub seed: u64,
    /// Loss weight applied to the objective (not to the losses fed back).
    pub weighting: Weighting<T>,
    /// Draw one sigma per batch instead of one per item.
    pub sigma_per_batch: bool,
    /// Decay the learning rate linearly to zero over `steps`.
    pub lr_decay: bool,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            lr: T::lit(1e-3),
            batch_size: 64,
            steps: 4000,
            optimizer: Optimizer::default(),
            seed: 0,
            weighting: Weighting::Unit,
            sigma_per_batch: false,
            lr_decay: false,
        }
    }
}

impl<T: Real> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > T::zero() && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if let Optimizer::Momentum { momentum } = self.optimizer {
            if !(momentum >= T::zero() && momentum < T::one()) {
                return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
            }
        }
        self.weighting.validate()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    /// Mean unweighted squared error over the batch.
    pub mean_loss: f64,
    pub snapshot_version: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<TrainLogRow>,
    pub refreshes: Vec<RefreshRecord>,
}

/// Sources that can report their current ungated rate estimate for the
/// refresh log.
pub trait RateReport<T: Real> {
    fn rate_estimate(&self) -> Option<crate::grid::Profile<T>> {
        None
    }
}

impl<T: Real> RateReport<T> for Scheduler<T> {
    fn rate_estimate(&self) -> Option<crate::grid::Profile<T>> {
        self.export_profile().ok()
    }
}

impl<T: Real> RateReport<T> for crate::scheduler::FixedSampler<T> {}

/// Runs `cfg.steps` optimizer steps. Each step draws a batch of data points
/// and noise levels, updates the network on the weighted objective, feeds the
/// unweighted per-item losses back to `source`, then gives it a chance to
/// refresh. Deterministic given `cfg.seed`.
pub fn train_loop<T, S>(
    data: &Dataset<T>,
    source: &mut S,
    mlp: &mut MlpDenoiser<T>,
    cfg: &TrainConfig<T>,
) -> Result<TrainOutcome>
where
    T: Real,
    S: NoiseSource<T> + RateReport<T>,
{
    cfg.validate()?;
    if data.dim() != mlp.dim() {
        return Err(Error::Shape { expected: mlp.dim(), got: data.dim() });
    }
    let mut rng = substream(cfg.seed, Stream::Train);
    let dim = data.dim();
    let mut opt = OptimizerState::new(mlp.params().len());
    let mut log = Vec::with_capacity(cfg.steps);
    let mut refreshes = Vec::new();
    let mut eps = vec![T::zero(); cfg.batch_size * dim];
    let mut rows = Vec::with_capacity(cfg.batch_size);
    let mut sigmas = Vec::with_capacity(cfg.batch_size);

    for step in 1..=cfg.steps {
        rows.clear();
        sigmas.clear();
        let shared = if cfg.sigma_per_batch { Some(source.draw(&mut rng)) } else { None };
        for _ in 0..cfg.batch_size {
            rows.push(rng.random_range(0..data.len()));
            sigmas.push(shared.unwrap_or_else(|| source.draw(&mut rng)));
        }
        crate::rng::fill_normal(&mut rng, &mut eps);
        let batch: Vec<BatchItem<'_, T>> = (0..cfg.batch_size)
            .map(|i| BatchItem { x0: data.row(rows[i]), sigma: sigmas[i], eps: &eps[i * dim..(i + 1) * dim] })
            .collect();
        let lg = mlp.loss_and_grad(&batch, &cfg.weighting)?;
        if lg.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Integration { step, msg: "non-finite gradient".into() });
        }
        let lr = if cfg.lr_decay { cfg.lr * T::count(cfg.steps + 1 - step) / T::count(cfg.steps) } else { cfg.lr };
        opt.step(&cfg.optimizer, lr, mlp.params_mut(), &lg.grad);
        for (&s, &l) in sigmas.iter().zip(&lg.per_item) {
            source.observe(s, l)?;
        }
        if let Some(snapshot) = source.end_step() {
            if let Some(rate) = source.rate_estimate() {
                refreshes.push(RefreshRecord::new(&snapshot, &rate));
            }
        }
        let mean_loss = lg.per_item.iter().map(|l| l.as_f64()).sum::<f64>() / cfg.batch_size as f64;
        log.push(TrainLogRow { step, mean_loss, snapshot_version: source.snapshot_version() });
    }
    Ok(TrainOutcome { log, refreshes })
}

/// Serialized network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    #[serde(default = "no_preconditioning")]
    pub preconditioning: Preconditioning<f64>,
    pub params: Vec<f64>,
}

fn no_preconditioning() -> Preconditioning<f64> {
    Preconditioning::None
}

impl Checkpoint {
    pub fn from_mlp<T: Real>(mlp: &MlpDenoiser<T>) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_sizes: mlp.layer_sizes().to_vec(),
            preconditioning: match *mlp.preconditioning() {
                Preconditioning::None => Preconditioning::None,
                Preconditioning::Edm { sigma_data } => Preconditioning::Edm { sigma_data: sigma_data.as_f64() },
            },
            params: mlp.params().iter().map(|p| p.as_f64()).collect(),
        }
    }

    pub fn into_mlp<T: Real>(self) -> Result<MlpDenoiser<T>> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint format {}", self.format_version)));
        }
        let precond = match self.preconditioning {
            Preconditioning::None => Preconditioning::None,
            Preconditioning::Edm { sigma_data } => Preconditioning::Edm { sigma_data: T::lit(sigma_data) },
        };
        MlpDenoiser::from_params(self.layer_sizes, self.params.into_iter().map(T::lit).collect(), precond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocate::baseline_sampler;
    use crate::grid::{LogGrid, SigmaRange};
    use crate::scheduler::{FixedSampler, SchedulerConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn construction_and_shapes() {
        let m = MlpDenoiser::<f64>::new(2, &[4], Preconditioning::None, false, &mut rng(0)).unwrap();
        assert_eq!(m.layer_sizes(), &[3, 4, 2]);
        assert_eq!(m.params().len(), 3 * 4 + 4 + 4 * 2 + 2);
        assert!(matches!(m.forward(&[1.0], 1.0), Err(Error::Shape { .. })));
        assert!(m.forward(&[1.0, 2.0], 0.0).is_err());
        assert!(MlpDenoiser::<f64>::new(0, &[4], Preconditioning::None, false, &mut rng(0)).is_err());
        assert!(MlpDenoiser::from_params(vec![3, 4, 2], vec![0.0; 5], Preconditioning::None).is_err());
        assert!(MlpDenoiser::from_params(vec![2, 4, 2], vec![0.0; 22], Preconditioning::None).is_err());
    }

    #[test]
    fn zero_final_layer_outputs_zero() {
        let m = MlpDenoiser::<f64>::new(3, &[8, 8], Preconditioning::None, true, &mut rng(1)).unwrap();
        for (x, s) in [([1.0, -2.0, 0.5], 0.1), ([10.0, 0.0, 3.0], 50.0)] {
            assert_eq!(m.forward(&x, s).unwrap(), vec![0.0; 3]);
        }
    }

    #[test]
    fn skip_path_dominates_at_low_noise() {
        let m =
            MlpDenoiser::<f64>::new(1, &[8], Preconditioning::Edm { sigma_data: 1.0 }, false, &mut rng(16)).unwrap();
        let x = [0.37];
        let out = m.forward(&x, 1e-4).unwrap()[0];
        assert!((out - 0.37).abs() < 1e-3);
        let zero =
            MlpDenoiser::<f64>::new(1, &[8], Preconditioning::Edm { sigma_data: 1.0 }, true, &mut rng(16)).unwrap();
        let (c_skip, _, _) = Preconditioning::Edm { sigma_data: 1.0 }.coefficients(2.0);
        assert_eq!(zero.forward(&x, 2.0).unwrap()[0], c_skip * 0.37);
        assert!(Preconditioning::Edm { sigma_data: 0.0 }.validate().is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let m = MlpDenoiser::<f64>::new(2, &[5], Preconditioning::None, false, &mut rng(2)).unwrap();
        assert_eq!(m.forward(&[0.3, 0.1], 0.7).unwrap(), m.forward(&[0.3, 0.1], 0.7).unwrap());
    }

    fn random_batch(dim: usize, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
        let mut r = rng(seed);
        let x0 = (0..n).map(|_| (0..dim).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let sig = (0..n).map(|_| 10f64.powf(r.random_range(-1.5..1.0))).collect();
        let eps = (0..n).map(|_| (0..dim).map(|_| normal(&mut r)).collect()).collect();
        (x0, sig, eps)
    }

    fn items<'a>(b: &'a (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)) -> Vec<BatchItem<'a, f64>> {
        (0..b.1.len()).map(|i| BatchItem { x0: &b.0[i], sigma: b.1[i], eps: &b.2[i] }).collect()
    }

    fn check_gradient(objective: impl Fn(&[f64]) -> f64, params: &[f64], grad: &[f64], seed: u64) {
        let mut pick = rng(seed);
        let h = 1e-5;
        for _ in 0..10 {
            let i = pick.random_range(0..params.len());
            let mut p = params.to_vec();
            p[i] += h;
            let up = objective(&p);
            p[i] -= 2.0 * h;
            let down = objective(&p);
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel <= 1e-4, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn network_gradients_match_central_differences() {
        let net = Network::<f64>::new(&[2, 4, 2], false, &mut rng(3)).unwrap();
        let mut r = rng(4);
        let inputs: Vec<Vec<f64>> =
            (0..5).map(|_| vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]).collect();
        let targets: Vec<Vec<f64>> =
            (0..5).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
        let items = |_: ()| -> Vec<(Vec<f64>, &[f64], f64)> {
            inputs.iter().zip(&targets).map(|(i, t)| (i.clone(), t.as_slice(), 0.2)).collect()
        };
        let lg = net.weighted_sq_error(&items(())).unwrap();
        let objective = |p: &[f64]| {
            let n = Network::from_params(vec![2, 4, 2], p.to_vec()).unwrap();
            n.weighted_sq_error(&items(())).unwrap().objective
        };
        check_gradient(objective, net.params(), &lg.grad, 10);
    }

    #[test]
    fn denoiser_gradients_match_central_differences() {
        let w = Weighting::Edm { sigma_data: 0.5 };
        let cases = [
            (1usize, vec![4usize], Preconditioning::None),
            (2, vec![4], Preconditioning::None),
            (2, vec![3, 5], Preconditioning::None),
            (1, vec![4], Preconditioning::Edm { sigma_data: 0.7 }),
            (2, vec![3, 5], Preconditioning::Edm { sigma_data: 1.3 }),
        ];
        for (dim, hidden, precond) in cases {
            let m = MlpDenoiser::<f64>::new(dim, &hidden, precond, false, &mut rng(4)).unwrap();
            let b = random_batch(dim, 6, 9);
            let batch = items(&b);
            let lg = m.loss_and_grad(&batch, &w).unwrap();
            let objective = |p: &[f64]| {
                let n = MlpDenoiser::from_params(m.layer_sizes().to_vec(), p.to_vec(), precond).unwrap();
                n.loss_and_grad(&batch, &w).unwrap().objective
            };
            check_gradient(objective, m.params(), &lg.grad, 10);
        }
    }

    #[test]
    fn doubling_weight_doubles_everything() {
        let m = MlpDenoiser::<f64>::new(2, &[6], Preconditioning::None, false, &mut rng(5)).unwrap();
        let b = random_batch(2, 8, 6);
        let batch = items(&b);
        let w = Weighting::Edm { sigma_data: 0.5 };
        let base = m.loss_and_grad(&batch, &w).unwrap();
        let double = m.loss_and_grad_with(&batch, |s| 2.0 * w.eval(s)).unwrap();
        assert_eq!(double.objective, 2.0 * base.objective);
        assert_eq!(double.per_item, base.per_item);
        for (d, g) in double.grad.iter().zip(&base.grad) {
            assert_eq!(*d, 2.0 * g);
        }
    }

    #[test]
    fn per_item_losses_are_unweighted_squared_errors() {
        let m = MlpDenoiser::<f64>::new(2, &[6], Preconditioning::None, false, &mut rng(7)).unwrap();
        let b = random_batch(2, 5, 8);
        let batch = items(&b);
        let lg = m.loss_and_grad(&batch, &Weighting::Edm { sigma_data: 0.3 }).unwrap();
        for (item, &l) in batch.iter().zip(&lg.per_item) {
            let noisy: Vec<f64> = item.x0.iter().zip(item.eps).map(|(x, e)| x + item.sigma * e).collect();
            let out = m.forward(&noisy, item.sigma).unwrap();
            let expected: f64 = out.iter().zip(item.x0).map(|(o, x)| (o - x).powi(2)).sum();
            assert_eq!(l, expected);
        }
        assert!(m.loss_and_grad(&[], &Weighting::Unit).is_err());
    }

    #[test]
    fn perfect_single_atom_denoiser_has_zero_loss() {
        // zero output layer plus bias = x1 makes x_hat identically x1
        let mut m = MlpDenoiser::<f64>::new(2, &[3], Preconditioning::None, true, &mut rng(9)).unwrap();
        let n = m.params().len();
        m.params_mut()[n - 2] = 0.7;
        m.params_mut()[n - 1] = -1.2;
        let x1 = [0.7, -1.2];
        let b = random_batch(2, 10, 1);
        let batch: Vec<_> = b.1.iter().zip(&b.2).map(|(&s, e)| BatchItem { x0: &x1, sigma: s, eps: e }).collect();
        let lg = m.loss_and_grad(&batch, &Weighting::Unit).unwrap();
        assert!(lg.per_item.iter().all(|&l| l == 0.0));
    }

    fn scheduler_config() -> SchedulerConfig<f64> {
        SchedulerConfig { k: 32, n_warm: 500, m: 500, ..SchedulerConfig::default() }
    }

    #[test]
    fn zero_steps_leave_the_network_unchanged() {
        let data = Dataset::two_point(1.0);
        let mut m = MlpDenoiser::<f64>::new(1, &[8], Preconditioning::None, false, &mut rng(11)).unwrap();
        let before = m.clone();
        let mut s = Scheduler::new(scheduler_config()).unwrap();
        let out = train_loop(&data, &mut s, &mut m, &TrainConfig { steps: 0, ..TrainConfig::default() }).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn endless_warm_up_matches_fixed_sampler() {
        let data = Dataset::two_point(1.0);
        let init = MlpDenoiser::<f64>::new(1, &[8], Preconditioning::None, false, &mut rng(12)).unwrap();
        let cfg = TrainConfig { steps: 40, batch_size: 16, ..TrainConfig::default() };
        let sched_cfg = SchedulerConfig { n_warm: u64::MAX, ..scheduler_config() };

        let mut a = init.clone();
        let mut sched = Scheduler::new(sched_cfg.clone()).unwrap();
        train_loop(&data, &mut sched, &mut a, &cfg).unwrap();

        let mut b = init.clone();
        let base = baseline_sampler(&sched_cfg.pi_base, &sched_cfg.grid().unwrap()).unwrap();
        let mut fixed = FixedSampler::new(base);
        train_loop(&data, &mut fixed, &mut b, &cfg).unwrap();

        assert_eq!(a, b);
        assert_ne!(a, init);
    }

    #[test]
    fn training_is_reproducible_and_refreshes() {
        let data = Dataset::two_point(1.0);
        let init = MlpDenoiser::<f64>::new(1, &[16], Preconditioning::None, false, &mut rng(13)).unwrap();
        let cfg = TrainConfig { steps: 200, batch_size: 32, ..TrainConfig::default() };
        let run = || {
            let mut m = init.clone();
            let mut s = Scheduler::new(scheduler_config()).unwrap();
            let out = train_loop(&data, &mut s, &mut m, &cfg).unwrap();
            (m, out.log, out.refreshes)
        };
        let (m1, log1, ref1) = run();
        let (m2, log2, ref2) = run();
        assert_eq!(m1, m2);
        assert_eq!(log1, log2);
        assert_eq!(ref1, ref2);
        assert!(!ref1.is_empty());
        assert_eq!(log1.last().unwrap().snapshot_version, ref1.len() as u64);
    }

    #[test]
    fn per_batch_sigma_shares_one_draw() {
        struct Recording(Vec<f64>, FixedSampler<f64>);
        impl NoiseSource<f64> for Recording {
            fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
                self.1.draw(rng)
            }
            fn observe(&mut self, sigma: f64, _loss: f64) -> Result<()> {
                self.0.push(sigma);
                Ok(())
            }
            fn end_step(&mut self) -> Option<std::sync::Arc<crate::scheduler::ScheduleSnapshot<f64>>> {
                None
            }
            fn snapshot_version(&self) -> u64 {
                0
            }
        }
        impl RateReport<f64> for Recording {}
        let data = Dataset::two_point(1.0);
        let grid = LogGrid::new(SigmaRange::new(0.01, 10.0).unwrap(), 16).unwrap();
        let base = baseline_sampler(&crate::allocate::Baseline::LogUniform, &grid).unwrap();
        let mut src = Recording(Vec::new(), FixedSampler::new(base));
        let mut m = MlpDenoiser::<f64>::new(1, &[4], Preconditioning::None, false, &mut rng(14)).unwrap();
        let cfg = TrainConfig { steps: 3, batch_size: 5, sigma_per_batch: true, ..TrainConfig::default() };
        train_loop(&data, &mut src, &mut m, &cfg).unwrap();
        for chunk in src.0.chunks(5) {
            assert!(chunk.iter().all(|&s| s == chunk[0]));
        }
        assert_eq!(src.0.len(), 15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m =
            MlpDenoiser::<f64>::new(2, &[5, 3], Preconditioning::Edm { sigma_data: 0.8 }, false, &mut rng(15)).unwrap();
        let text = serde_json::to_string(&Checkpoint::from_mlp(&m)).unwrap();
        let back: MlpDenoiser<f64> = serde_json::from_str::<Checkpoint>(&text).unwrap().into_mlp().unwrap();
        assert_eq!(back, m);
        let mut bad = Checkpoint::from_mlp(&m);
        bad.format_version = 99;
        assert!(bad.into_mlp::<f64>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::<f64>::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::<f64>::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::<f64>::default() }.validate().is_err());
        let bad_mom = TrainConfig { optimizer: Optimizer::Momentum { momentum: 1.0 }, ..TrainConfig::<f64>::default() };
        assert!(bad_mom.validate().is_err());
    }
}
