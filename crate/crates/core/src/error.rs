use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("communication graph is disconnected; identification requires a connected graph so that the lifted problem shares the optimum of the centralized least-squares problem")]
    Disconnected,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid feeder: {0}")]
    Feeder(String),

    #[error("power iteration did not converge after {iters} iterations")]
    NoConvergence { iters: usize },

    #[error("solver diverged at iteration {k}: {reason}")]
    Diverged { k: u64, reason: String },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("{path}: {source}")]
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

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
