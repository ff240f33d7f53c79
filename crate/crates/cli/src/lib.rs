//! Config-driven experiments for SEEK Gaussian processes: single runs,
//! one-axis sweeps and side-by-side kernel comparisons.

pub mod config;
pub mod error;
pub mod report;
pub mod runner;

pub use config::{ConfigKind, ExperimentConfig, KernelConfig, Overrides};
pub use error::{CliError, Result};
pub use runner::{execute, BatchResult, Execution, RunRecord};
