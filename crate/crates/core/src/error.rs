use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown item index {index} (catalog has {catalog_size} items)")]
    UnknownItem { index: usize, catalog_size: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error("input of {len} tokens exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("letter {0:?} is not a single token on the backend")]
    MultiTokenLetter(String),

    #[error("remote backend unavailable (retriable): {0}")]
    RemoteUnavailable(String),

    #[error("remote backend protocol error: {0}")]
    RemoteProtocol(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite {path}: run `{producer}` first")]
    MissingPrerequisite { path: PathBuf, producer: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }
}
