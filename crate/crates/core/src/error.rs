use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("softmax row {row} is fully masked")]
    FullyMasked { row: usize },
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("token index {index} outside vocabulary of {vocab}")]
    InvalidToken { index: usize, vocab: usize },
    #[error("timestep {t} outside {lo}..={hi}")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unknown concept {0}")]
    UnknownConcept(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Validation problems map to exit code 1; everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Schedule(_) | Error::Invalid(_) | Error::UnknownConcept(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
