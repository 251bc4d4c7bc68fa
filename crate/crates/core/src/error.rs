use std::path::PathBuf;

use thiserror::Error;

/// Every failure the laboratory can report.
///
/// The variants line up with the CLI exit-code classes: statistical failures
/// exit with 1, configuration and usage problems with 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite loss at step {step} (lr {lr:.3e}); grad norms: {grad_norms}")]
    NonFinite { step: usize, lr: f64, grad_norms: String },

    #[error("statistical check failed: {0}")]
    Statistical(String),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension(format!("{op}: incompatible shapes {lhs:?} and {rhs:?}"))
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Statistical(_) | Error::NonFinite { .. } => 1,
            Error::Config(_) | Error::Usage(_) | Error::Format { .. } | Error::Io { .. } => 2,
            Error::Dimension(_) | Error::Internal(_) => 3,
        }
    }
}
