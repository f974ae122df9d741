use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    Format(String),
    #[error("coordinate ({x}, {y}) outside {width}x{height} image")]
    Bounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// `epoch` counts from 1, like the loss curve.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid model file: {0}")]
    Model(String),
    #[error("{stage} stage failed")]
    Stage {
        stage: crate::fusion::Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
