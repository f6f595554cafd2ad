use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),

    #[error("unknown volume kind {0:?}")]
    UnknownKind(String),

    #[error("payload length mismatch for {path}: expected {expected} bytes, found {actual}")]
    LengthMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("missing volume {name} in {dir}")]
    MissingVolume { dir: PathBuf, name: String },

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("too few nonzero paired differences: {0} (at least 5 required)")]
    TooFewPairs(usize),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
