//! Simulation and benchmark harness for the moving-horizon estimator.
//!
//! - [`config`]: simulation and estimator settings, loaded from TOML or JSON.
//! - [`sim`]: ground-truth trajectories and noisy sensor streams.
//! - [`setup`]: models, statics and priors shared by both estimators.
//! - [`iekf`]: the iterated extended Kalman filter baseline.
//! - [`runner`]: event-ordered replay through either estimator.
//! - [`metrics`]: accuracy, consistency and timing summaries.
//! - [`report`]: CSV and JSON output.
//! - [`checks`]: residuals of a dataset at the ground truth.

pub mod checks;
pub mod config;
pub mod error;
pub mod iekf;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod setup;
pub mod sim;

pub use config::{Config, EstimatorConfig, SensorSet, SimConfig};
pub use error::{HarnessError, Result};
pub use runner::{EstimatorKind, RunOutput};
pub use sim::{simulate, Dataset};
