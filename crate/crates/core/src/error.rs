use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),
    #[error("{file}:{line}: {msg}")]
    Ingest {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    /// Short machine-readable category, used as the CLI error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Ingest { .. } => "ingest",
            Error::Data(_) => "data",
            Error::Io { .. } => "io",
            Error::Checkpoint(_) => "checkpoint",
            Error::Usage(_) => "usage",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
