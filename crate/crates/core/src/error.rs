use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("unknown passage id {0:?}")]
    UnknownPassage(String),

    #[error("collection is empty; statistics are undefined")]
    EmptyCollection,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index has no dense vectors but a dense query was requested")]
    SparseOnlyIndex,

    #[error("index holds dense vectors; an encoder model is required to query it")]
    ModelRequired,

    #[error("model does not match the one the index was built with")]
    ModelMismatch,

    #[error("corrupt container: {0}")]
    Corrupt(String),

    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
