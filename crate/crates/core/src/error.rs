use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("timing error at row {row}: {msg}")]
    Timing { row: usize, msg: String },

    #[error("parse error at row {row}, column `{column}`: {msg}")]
    Parse {
        row: usize,
        column: String,
        msg: String,
    },

    #[error("unsupported model format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("model dimension mismatch: {0}")]
    Dimension(String),

    #[error("malformed model file: {0}")]
    Malformed(String),

    #[error("variant mismatch: {0}")]
    Variant(String),

    #[error("no trainable episodes: {0}")]
    NoTrainableEpisodes(String),

    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
