use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a schema or a domain invariant.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Several independent validation failures, reported together.
    #[error("{} validation error(s):\n  {}", .0.len(), .0.join("\n  "))]
    Itemized(Vec<String>),

    /// An operation that needs at least one element got none.
    #[error("{0}")]
    Empty(&'static str),

    #[error("{0}")]
    Metric(String),

    #[error("infeasible composition: {0}")]
    Infeasible(String),

    #[error("backend `{backend}` failed on image `{image_id}`: {message}")]
    Backend {
        backend: String,
        image_id: String,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", .path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_) | Error::Itemized(_) | Error::Json { .. }
        )
    }
}
