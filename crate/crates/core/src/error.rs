use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    /// An operation was invoked without the state it depends on, e.g. a
    /// backward pass without the forward cache.
    #[error("state error: {0}")]
    State(String),

    /// Malformed NTW file: bad magic, unsupported version or dtype, truncation.
    #[error("format error: {0}")]
    Format(String),

    /// The file is well formed but does not match the model it is loaded into.
    #[error("load error: {0}")]
    Load(String),

    /// Dataset ingestion problems.
    #[error("data error: {0}")]
    Data(String),

    #[error("cannot decode image {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
