use thiserror::Error;

/// Errors raised by the filtering library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),
    #[error("non-finite value in {term}")]
    NonFinite { term: String },
    #[error("non-finite evaluation at coordinate {coordinate}")]
    NonFiniteAt { coordinate: usize },
    #[error("wrong variant: {0}")]
    WrongVariant(&'static str),
    #[error("refused: {0}")]
    Refused(String),
    #[error("degenerate particle weights at step {step}")]
    DegenerateWeights { step: usize },
    #[error("io: {0}")]
    Io(String),
    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

pub(crate) fn check_finite(term: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { term: term.to_string() })
    }
}
