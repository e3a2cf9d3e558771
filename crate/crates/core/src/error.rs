use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MheError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("value does not satisfy the {manifold} constraint")]
    InvalidValue { manifold: &'static str },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("assignment error: {0}")]
    Assignment(String),

    #[error("process chain is empty")]
    EmptyChain,

    #[error("propagated covariance is singular in tangent directions {directions:?}")]
    SingularCovariance { directions: Vec<usize> },

    #[error("non-finite value in residual `{residual}`")]
    NonFinite { residual: String },

    #[error("factorization failed: non-positive pivot in block `{block}`")]
    Factorization { block: String },

    #[error("marginalized parameters are rank deficient in blocks {blocks:?}")]
    RankDeficient { blocks: Vec<String> },

    #[error("matrix is indefinite (smallest eigenvalue {min_eigenvalue:e}, largest {max_eigenvalue:e})")]
    Indefinite {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, MheError>;

impl From<serde_json::Error> for MheError {
    fn from(err: serde_json::Error) -> Self {
        MheError::Serialization(err.to_string())
    }
}
