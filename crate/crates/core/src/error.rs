use thiserror::Error;

/// Errors reported by the fitting library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("design is empty")]
    EmptyDesign,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("variation bound must be nonnegative, got {0}")]
    NegativeBound(f64),

    #[error("integer overflow while computing {0}")]
    Overflow(&'static str),

    #[error("degenerate regressor: need at least two distinct abscissae")]
    DegenerateRegressor,

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("malformed model: {0}")]
    Model(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
