use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("infeasible phantom spec: {0}")]
    InfeasibleSpec(String),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid network config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("incompatible weights: {0}")]
    IncompatibleWeights(String),

    #[error("corrupt weight file: {0}")]
    CorruptWeights(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
