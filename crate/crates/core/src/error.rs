use std::io;
use std::path::PathBuf;

use htgnn_autograd::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    /// A loss term became non-finite during training.
    #[error("training diverged at epoch {epoch}, step {step}: {term} = {value}")]
    Divergence {
        epoch: usize,
        step: usize,
        term: String,
        value: f64,
    },
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the input data rather than the program.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Data(_) | Error::Parse { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
