use std::path::PathBuf;

/// Errors produced by the library.
///
/// Variants map onto distinct CLI exit codes, so keep the categories coarse.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    #[error("no positive frames: tube and ground truth do not overlap in time")]
    NoPositiveFrames,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: schema violation: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("{path}: unsupported schema/config version {found:?} (expected {expected:?})")]
    Version {
        path: PathBuf,
        found: String,
        expected: String,
    },
}

impl Error {
    pub(crate) fn malformed(msg: impl Into<String>) -> Self {
        Error::MalformedInput(msg.into())
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
