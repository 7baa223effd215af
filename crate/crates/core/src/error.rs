use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{stage} diverged at step {step}: non-finite loss")]
    Divergence { stage: String, step: usize },

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error("malformed artifact {path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn diverged(stage: &str, step: usize) -> Self {
        Error::Divergence {
            stage: stage.to_string(),
            step,
        }
    }

    /// Attributes a divergence raised by a port to an optimizer step.
    pub(crate) fn at_step(self, stage: &str, step: usize) -> Self {
        match self {
            Error::Divergence { .. } => Error::diverged(stage, step),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
