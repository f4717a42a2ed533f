use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum SadError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("model has no active sites")]
    EmptyModel,

    #[error("pixel ({x}, {y}) has no valid candidate sites")]
    EmptyCandidates { x: usize, y: usize },

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("framing error at byte offset {offset}: {reason}")]
    Framing { offset: usize, reason: String },

    #[error("unsupported file version {0}")]
    UnsupportedVersion(u16),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SadError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(SadError::InvalidInput(msg.into()))
}
