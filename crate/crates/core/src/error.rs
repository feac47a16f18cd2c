use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FedGpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FedGpError {
    /// Matrix or vector shapes disagree.
    #[error("input shape mismatch: {0}")]
    Shape(String),

    /// A parameter lies outside its admissible domain (e.g. a nonpositive length-scale).
    #[error("parameter out of domain: {0}")]
    Domain(String),

    /// Malformed call arguments (bad indices, empty lists, oversized batches).
    #[error("invalid input: {0}")]
    Input(String),

    /// Internally inconsistent configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Cholesky failed even after the jitter ladder was exhausted.
    #[error("cholesky factorization failed after jitter levels {jitters:?}")]
    NotPositiveDefinite { jitters: Vec<f64> },

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<FedGpError>,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<FedGpError>,
    },

    #[error("repeat {repeat}: {source}")]
    Repeat {
        repeat: usize,
        #[source]
        source: Box<FedGpError>,
    },

    #[error("{path}:{line}: column {column}: {message}")]
    Csv {
        path: PathBuf,
        line: u64,
        column: usize,
        message: String,
    },

    #[error("config {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FedGpError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        FedGpError::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        FedGpError::Domain(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        FedGpError::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        FedGpError::Config(msg.into())
    }

    pub(crate) fn in_client(self, client: usize) -> Self {
        FedGpError::Client {
            client,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        FedGpError::Round {
            round,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_repeat(self, repeat: usize) -> Self {
        FedGpError::Repeat {
            repeat,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedGpError::Io {
            path: path.into(),
            source,
        }
    }
}
