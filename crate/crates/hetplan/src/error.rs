use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("insufficient points: {what} needs at least {needed}, got {got}")]
    InsufficientPoints {
        what: String,
        needed: usize,
        got: usize,
    },
    #[error("infeasible ({constraint}): {detail}")]
    Infeasible { constraint: String, detail: String },
    #[error("instance too large for exhaustive search: {0}")]
    SizeGuard(String),
    #[error("state ratios sum to {0}, expected 1")]
    RatioSum(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

impl Error {
    pub(crate) fn infeasible(constraint: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Infeasible {
            constraint: constraint.into(),
            detail: detail.into(),
        }
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self, Error::Infeasible { .. })
    }
}
