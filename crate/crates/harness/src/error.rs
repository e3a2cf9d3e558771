use mhe_core::MheError;
use thiserror::Error;

/// Errors raised by the harness.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("invalid dataset: {0}")]
    Data(String),

    #[error("estimator failed at step {step} (t = {stamp}): {source}")]
    Estimator {
        step: usize,
        stamp: f64,
        #[source]
        source: MheError,
    },
}

impl HarnessError {
    /// Process exit code: 2 for configuration errors, 3 for estimator
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Estimator { .. } => 3,
            HarnessError::Io { .. } | HarnessError::Data(_) => 1,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, err: impl std::fmt::Display) -> Self {
        HarnessError::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }
}

/// Configuration problems detected by the core library stay configuration errors.
pub fn config_error(err: MheError) -> HarnessError {
    match err {
        MheError::Configuration(msg) => HarnessError::Config(msg),
        other => HarnessError::Config(other.to_string()),
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
