use thiserror::Error;

/// Errors raised anywhere in the credit-assignment pipeline.
#[derive(Debug, Error)]
pub enum CreditError {
    /// A non-finite value reached a stage that requires finite evidence.
    #[error("non-finite value in {context}: {value}")]
    NonFinite { context: &'static str, value: f64 },

    /// An argument outside the documented domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Inconsistent token scoring (e.g. a sampled token with zero probability).
    #[error("inconsistent scoring: {0}")]
    Scoring(String),

    /// Environment too large for exhaustive enumeration.
    #[error("environment too large for exact enumeration: {0}")]
    TooLarge(String),

    /// A conditional branch is empty (V in {0, 1}).
    #[error("degenerate branch: {0}")]
    DegenerateBranch(String),

    /// Gradient contained NaN or infinity.
    #[error("non-finite gradient at parameter {index}: {value}")]
    NonFiniteGradient { index: usize, value: f64 },

    /// Malformed or rejected record in an input log.
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CreditError>;
