//! Crate-wide error type, split by how the CLI maps failures to exit codes.

use std::path::PathBuf;

/// Errors surfaced by the library's fallible entry points.
///
/// Shape mismatches inside the tensor graph are programming-contract
/// violations and panic with the offending op and shapes instead; public
/// model/pipeline entry points validate their inputs and return these.
#[derive(Debug, thiserror::Error)]
pub enum CrtError {
    /// Bad flags, conflicting options, invalid configuration values.
    #[error("invalid input: {0}")]
    Usage(String),

    /// Unreadable/missing/malformed files, dimension mismatches, bad manifests.
    #[error("data error: {0}")]
    Data(String),

    /// I/O failure with the path that caused it.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Non-finite values, gradient-check failures, diverged training.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CrtError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CrtError::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CrtError::Usage(_) => 1,
            CrtError::Data(_) | CrtError::Io { .. } => 2,
            CrtError::Numerical(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CrtError>;
