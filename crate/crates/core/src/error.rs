use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {id} out of range for table `{table}` with {rows} rows")]
    Index { table: String, id: usize, rows: usize },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("unsupported schema version `{found}` in {path} (expected `{expected}`)")]
    Schema { path: PathBuf, found: String, expected: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
