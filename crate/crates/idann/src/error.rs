use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid layer stack, shape, or configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// A precondition of an operation was violated (empty set, bad range).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Non-finite value produced where finiteness is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed binary file; `offset` is the byte position of the problem.
    #[error("format error in {path}: {message} (byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// Inconsistent internal state (e.g. stale backward cache).
    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
