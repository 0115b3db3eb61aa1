use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum FsgcError {
    #[error("degenerate margin at time index {time_index}: {detail}")]
    DegenerateMargin { time_index: usize, detail: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("no time-point pair has pairwise support above c0 = {c0}")]
    EmptySupport { c0: u64 },

    #[error("argument out of domain: {0}")]
    OutOfDomain(String),

    #[error("not enough supported pairs: have {supported}, need at least {required}")]
    NotEnoughPairs { supported: usize, required: usize },

    #[error("normal equations remained singular after {escalations} damping escalations")]
    SingularNormalEquations { escalations: usize },

    #[error("matrix is not positive semidefinite (minimum eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("grid mismatch: expected {expected} points, got {actual}")]
    GridMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("no held-out points to score")]
    NoHeldOutPoints,

    #[error("zero variance at time index {time_index}; correlation undefined")]
    ZeroVariance { time_index: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FsgcError>;
