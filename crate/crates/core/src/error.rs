use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid UTF-8 at byte offset {position}")]
    InvalidUtf8 { position: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward was already run on this tape; call zero_grad before running it again")]
    BackwardTwice,

    #[error("invalid k-series entry {entry:?}: {reason}")]
    KSeries { entry: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user input or configuration rather than
    /// a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidUtf8 { .. }
                | Error::Empty(_)
                | Error::TokenOutOfRange { .. }
                | Error::KSeries { .. }
                | Error::Config(_)
                | Error::TooLong { .. }
                | Error::Corpus(_)
                | Error::Json(_)
        )
    }
}
