//! Gaussian-process regression with learnable nonstationary kernels.
//!
//! The centerpiece is [`seek::SeekKernel`]: an activation function applied
//! to a sum of base kernels weighted by input-dependent neural networks,
//! plus an input-dependent bias inner product. Every piece of that
//! construction is a valid kernel by the closure rules in [`kernels`], so
//! the composite stays symmetric and positive semi-definite by construction.
//!
//! Around it sit the pieces needed to train and evaluate such models:
//!
//! * [`kernels`]: stationary base kernels, the kernel algebra and
//!   numerical validity checks.
//! * [`neural`]: small feed-forward networks with a flat parameter view.
//! * [`seek`]: the SEEK kernel plus the Gibbs and deep-kernel baselines.
//! * [`gp`]: standardization, marginal likelihood, posterior prediction.
//! * [`optim`]: analytic gradients, finite-difference checks, L-BFGS and
//!   multi-restart training.
//! * [`bench`]: analytic test functions, Sobol designs and CSV ingestion.
//! * [`metrics`]: NRMSE and interval-score evaluation.
//! * [`sampling`]: random kernel configurations for property checks.

pub mod bench;
pub mod covariance;
pub mod error;
pub mod gp;
pub mod kernels;
pub mod metrics;
pub mod neural;
pub mod optim;
pub mod sampling;
pub mod seek;

pub use covariance::{Covariance, Kernel};
pub use error::{Error, Result};
pub use gp::{Dataset, GpModel, IntervalMode, Noise, Posterior, PosteriorPrediction, Standardizer};
pub use kernels::{BaseKernel, BaseKernelKind, KernelExpr, LengthscaleParams, MaternNu};
pub use metrics::MetricsReport;
pub use neural::{Mlp, MlpSpec, ParamLayout, ParamVector};
pub use optim::{FitResult, StepMode, TrainConfig};
pub use seek::{DeepKernel, GibbsKernel, SeekActivation, SeekKernel};

/// Points are stored one per row.
pub type Points = nalgebra::DMatrix<f64>;
