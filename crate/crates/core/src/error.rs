use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents that cannot work together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An index or sub-block that falls outside a tensor.
    #[error("range error on axis {axis}: {msg}")]
    Range { axis: usize, msg: String },

    /// Parameters that are individually valid but do not fit the input,
    /// such as a stride that does not tile the image.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data that is missing, corrupt, or too small to use.
    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A fast path disagreed with its reference implementation.
    #[error("cross-check failed: {0}")]
    Check(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn reason_code(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Range { .. } => "range",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Degenerate(_) => "degenerate",
            Error::Check(_) => "check",
            Error::Training { .. } => "training",
            Error::Io { .. } => "io",
        }
    }

    /// True for errors caused by the caller's parameters rather than by the
    /// data being processed.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Range { .. }
                | Error::Config(_)
                | Error::Degenerate(_)
                | Error::Check(_)
                | Error::Training { .. }
        )
    }
}
