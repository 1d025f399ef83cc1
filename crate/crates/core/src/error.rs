use thiserror::Error;

/// Errors surfaced by the library.
///
/// `Config`, `Parse`, and `OutOfBounds` indicate bad inputs (CLI maps them to
/// exit code 1); the rest are runtime failures (exit code 2).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("parse error at record {index}: {message}")]
    Parse { index: usize, message: String },

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    /// True for errors caused by invalid user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse { .. } | Error::OutOfBounds(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
