use thiserror::Error;

/// Errors surfaced by the model, samplers, estimators, and ingestion.
#[derive(Debug, Error)]
pub enum RcmError {
    /// A matrix that must be symmetric positive definite failed its
    /// Cholesky factorization (nonpositive pivot).
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    /// A parameter left its validity domain (e.g. nu <= p - 1).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The nu search was still increasing at the upper cap. Carries the
    /// cap so callers can interpret it as "no detectable heterogeneity".
    #[error("nu objective still increasing at cap {cap}")]
    Bracket { cap: f64 },

    #[error("maximum iterations ({0}) exceeded")]
    MaxIterationsExceeded(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("missing value at {0}")]
    MissingValue(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RcmError>;

impl RcmError {
    pub fn domain(msg: impl Into<String>) -> Self {
        RcmError::Domain(msg.into())
    }

    /// Stable category name, used as the error prefix on standard error.
    pub fn category(&self) -> &'static str {
        match self {
            RcmError::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            RcmError::Domain(_) => "DomainError",
            RcmError::DimensionMismatch { .. } => "DimensionMismatch",
            RcmError::Bracket { .. } => "BracketError",
            RcmError::MaxIterationsExceeded(_) => "MaxIterationsExceeded",
            RcmError::Parse(_) => "ParseError",
            RcmError::MissingValue(_) => "MissingValue",
            RcmError::Schema(_) => "SchemaError",
            RcmError::Io(_) => "IoError",
        }
    }
}
