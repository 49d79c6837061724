use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("degenerate mask: row {row} has no unmasked entries")]
    DegenerateMask { row: usize },
    #[error("unsupported size: {0}")]
    UnsupportedSize(String),
    #[error("generation failed: {0}")]
    GenerationFailure(String),
    #[error("optimizer aborted: non-finite gradient in parameter `{param}`")]
    OptimizerAbort { param: String },
    #[error("numerical underflow: {0}")]
    NumericalUnderflow(String),
    #[error("impossible transition: {0}")]
    ImpossibleTransition(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config hash mismatch: expected {expected}, found {found}")]
    ConfigMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    /// True for errors caused by bad numbers rather than bad arguments.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::OptimizerAbort { .. }
                | Error::NumericalUnderflow(_)
                | Error::NonFinite(_)
                | Error::ImpossibleTransition(_)
        )
    }
}
