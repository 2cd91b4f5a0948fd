use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{file}: row {row}: {message}")]
    Csv {
        file: String,
        row: usize,
        message: String,
    },

    #[error("{file}: row {row}, column `{column}`: cannot parse {value:?}: {message}")]
    Field {
        file: String,
        row: usize,
        column: String,
        value: String,
        message: String,
    },

    #[error("{file}: row {row}: dangling key {key}")]
    DanglingKey {
        file: String,
        row: usize,
        key: String,
    },

    #[error("{file}: row {row}: {message}")]
    Integrity {
        file: String,
        row: usize,
        message: String,
    },

    #[error("unknown study `{0}`")]
    UnknownStudy(String),

    #[error("unknown key {0}")]
    UnknownKey(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("empty cohort")]
    EmptyCohort,

    #[error("study `{0}` has no enrollment events")]
    NoEvents(String),

    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("schema hash mismatch: model trained on {expected}, features have {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("missing upstream artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
