//! Information-guided noise allocation for diffusion-model training.
//!
//! The crate turns Bayes-optimal denoising error into a conditional-entropy
//! rate over noise levels (`d/dsigma H[x0 | x_sigma] = mmse(sigma) / sigma^3`)
//! and uses that rate to decide how often each noise level is visited during
//! training and where solver steps are placed at inference time.
//!
//! Modules:
//!
//! - [`grid`]: log-sigma grids, tabulated profiles, densities and inverse-CDF sampling.
//! - [`allocate`]: gating, pivot calibration, target allocation and schedules.
//! - [`oracle`]: exact empirical-Bayes denoiser and a Gaussian-prior reference.
//! - [`toy`]: the closed-form two-point model and its pitchfork structure.
//! - [`scheduler`]: the online schedule-adaptation state machine.
//! - [`infer`]: information-spaced inference grids and a Heun PF-ODE sampler.
//! - [`train`]: a small MLP denoiser with analytic gradients and a training loop.
//! - [`io`]: CSV / JSON file formats.
//!
//! Numerics are generic over [`Real`] (`f32` or `f64`); the aliases below fix
//! the scalar type for the common cases.

// `!(x > 0)` is used on purpose so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocate;
pub mod error;
pub mod grid;
pub mod infer;
pub mod io;
pub mod oracle;
pub mod rng;
pub mod scalar;
pub mod scheduler;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

pub type SigmaRange64 = grid::SigmaRange<f64>;
pub type LogGrid64 = grid::LogGrid<f64>;
pub type Profile64 = grid::Profile<f64>;
pub type Density64 = grid::TabulatedDensity<f64>;
pub type Dataset64 = oracle::Dataset<f64>;
pub type Scheduler64 = scheduler::Scheduler<f64>;
pub type SchedulerConfig64 = scheduler::SchedulerConfig<f64>;
pub type InferenceGrid64 = infer::InferenceGrid<f64>;
pub type Mlp64 = train::MlpDenoiser<f64>;

pub type LogGrid32 = grid::LogGrid<f32>;
pub type Profile32 = grid::Profile<f32>;
pub type Density32 = grid::TabulatedDensity<f32>;
pub type Dataset32 = oracle::Dataset<f32>;
pub type Mlp32 = train::MlpDenoiser<f32>;
