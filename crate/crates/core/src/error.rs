use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller passed an argument outside the operation's domain.
    #[error("input error: {0}")]
    Input(String),

    /// The replay buffer cannot serve the request yet.
    #[error("replay not ready: {size} entries stored, {requested} requested")]
    NotReady { size: usize, requested: usize },

    /// An operation was invoked out of order.
    #[error("state error: {0}")]
    State(String),

    /// A loss or gradient became NaN or infinite.
    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    /// The human-normalized score is undefined when human and random scores coincide.
    #[error("undefined score for {game}: human score equals random score ({score})")]
    UndefinedScore { game: String, score: f64 },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A snapshot or CSV file is malformed or fails its integrity check.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
