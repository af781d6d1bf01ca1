use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by graph ingestion, encoders, training and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric domain error: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{count} node(s) missing from embedding file, e.g. {examples:?}")]
    Coverage { count: usize, examples: Vec<String> },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than by
    /// numerics or the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Argument(_)
                | Error::Format(_)
                | Error::Coverage { .. }
                | Error::Lookup(_)
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
