use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// I/O failure, carrying the path and the OS-level cause.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but does not match the expected binary layout.
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    /// A caller violated an operation's preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Scene generation could not satisfy its placement constraints.
    #[error("scene generation failed: {0}")]
    Generation(String),

    /// Bad key or value in a run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// The optimizer saw a non-finite gradient.
    #[error("non-finite gradient in segment `{0}`")]
    NonFiniteGradient(String),

    /// Training produced a non-finite loss.
    #[error("loss is not finite at step {step} (tau={tau})")]
    NanLoss { step: usize, tau: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

/// Returns a contract error unless `cond` holds.
pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Contract(msg()))
    }
}
