//! Crate-wide error type and exit-code mapping.

use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// The CLI maps these onto its stable exit-code contract:
/// 1 for I/O, 2 for validation/argument problems, 3 for numeric divergence.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file (bad JSON, bad header, truncated payload).
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// A config field, argument, or data invariant failed validation.
    #[error("validation: {0}")]
    Validation(String),

    /// The requested volume shape cannot hold all configured organs.
    #[error("placement infeasible: {0}")]
    PlacementInfeasible(String),

    /// A loss went NaN during training.
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }

    /// Process exit code for the CLI contract (0 = success is implied).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 1,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::PlacementInfeasible(_) => 2,
            Error::Divergence(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
