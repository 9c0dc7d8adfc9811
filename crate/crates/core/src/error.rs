use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's shape or range contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A dataset sample could not be read back.
    #[error("failed to load sample {sample_id}: {reason}")]
    Load { sample_id: String, reason: String },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Training produced a non-finite loss.
    #[error("diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An operation declined to overwrite existing output.
    #[error("refusing to overwrite: {0}")]
    Refused(String),

    #[error("plot: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
