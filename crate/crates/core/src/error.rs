use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, VsdmError>;

#[derive(Debug, Error)]
pub enum VsdmError {
    /// An argument fell outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The forward kernel could not be built (singular `H_t`, failed Cholesky).
    #[error("kernel error: {0}")]
    Kernel(String),

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl VsdmError {
    pub fn domain(msg: impl Into<String>) -> Self {
        VsdmError::Domain(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VsdmError::Io {
            path: path.into(),
            source,
        }
    }
}
