use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the fusion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: field `{field}`: {message}")]
    Manifest {
        line: usize,
        field: String,
        message: String,
    },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("numerical abort at epoch {epoch}, step {step}: {message}")]
    NumericalAbort {
        epoch: usize,
        step: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the input data rather than numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Manifest { .. }
                | Error::DuplicateId(_)
                | Error::Data(_)
                | Error::Checkpoint(_)
                | Error::Io { .. }
                | Error::Image(_)
                | Error::Shape(_)
                | Error::InvalidArgument(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
