//! Moving-horizon estimation on manifolds.
//!
//! The crate is organised bottom-up:
//!
//! - [`manifold`]: parameter blocks and the ⊞/⊟ operators.
//! - [`problem`]: states, measurements, and update/process model interfaces.
//! - [`solver`]: block-sparse normal equations and Levenberg-Marquardt.
//! - [`marginalization`]: Schur-complement priors over remaining parameters.
//! - [`engine`]: the online sliding-window estimator.
//! - [`models`]: planar robot models and linear test fixtures.

pub mod engine;
pub mod error;
pub mod jacobian_check;
pub mod marginalization;
pub mod models;
pub mod manifold;
pub mod problem;
pub mod solver;

pub use error::{MheError, Result};
pub use manifold::{ManifoldKind, ParameterBlock};
pub use problem::ParamKey;
