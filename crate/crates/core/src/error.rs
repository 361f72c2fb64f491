use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A CSV row failed validation. `line` is 1-based and counts the header.
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("inconsistent label for entity {entity}: {first} vs {second}")]
    InconsistentLabel {
        entity: String,
        first: String,
        second: String,
    },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown entity {0}")]
    UnknownEntity(String),

    #[error("single-class training data: need at least one positive and one negative row")]
    SingleClass,

    #[error("empty feature mask")]
    EmptyMask,

    #[error("schema mismatch: expected {expected} features, got {got}")]
    SchemaMismatch { expected: usize, got: usize },

    #[error("model artifact: {0}")]
    Artifact(String),

    #[error("statistic undefined: {0}")]
    Undefined(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the environment (file system) rather than of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
