//! Error type shared across the library.
//!
//! Binary/text codecs report the byte offset of the first malformed field so
//! corrupt stores can be diagnosed without a hex editor; pipeline stages wrap
//! the underlying failure together with the stage name and a digest of the
//! stage inputs.

use std::path::PathBuf;

/// All errors produced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Underlying I/O failure, annotated with the path being touched.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Structurally malformed file. `offset` is the byte position of the
    /// first field that failed to parse (for binary stores) or the byte
    /// offset of the offending line (for text formats).
    #[error("{path}: format error at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    /// An invariant on in-memory data was violated (bad dimension, duplicate
    /// id, out-of-range threshold, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A pipeline stage failed; carries the stage name and a digest of the
    /// stage's input files so reruns can be correlated with exact inputs.
    #[error("stage '{stage}' failed (input digest {digest}): {source}")]
    Stage {
        stage: String,
        digest: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }

    pub fn validation(reason: impl Into<String>) -> Self {
        Error::Validation(reason.into())
    }

    /// Process exit code for the CLI: 1 for validation/format problems the
    /// user can fix in their inputs, 2 for runtime failures (I/O, stage
    /// failures mid-pipeline).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Format { .. } => 1,
            Error::Io { .. } | Error::Stage { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
