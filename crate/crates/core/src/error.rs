use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum CafoError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("{op}: division by zero")]
    DivisionByZero { op: &'static str },

    #[error("backward requires a scalar root node, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("data format error: {0}")]
    DataFormat(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("training diverged: loss non-finite for {batches} consecutive batches (epoch {epoch})")]
    Diverged { epoch: usize, batches: usize },

    #[error("cholesky factorization failed even with maximum jitter")]
    CholeskyFailed,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CafoError>;
