use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("schema mismatch: model expects {expected}, dataset has {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Broad classes used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::Numerical(_) => ErrorClass::Numerical,
            Error::Io { .. }
            | Error::Data(_)
            | Error::UndefinedMetric(_)
            | Error::Degenerate(_)
            | Error::SchemaMismatch { .. }
            | Error::Format(_) => ErrorClass::Data,
        }
    }

    /// Short stable tag used in machine-parseable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Degenerate(_) => "degenerate",
            Error::SchemaMismatch { .. } => "schema_mismatch",
            Error::Format(_) => "format",
            Error::Numerical(_) => "numerical",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(format!("csv: {e}"))
    }
}
