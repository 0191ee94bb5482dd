use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0} did not converge")]
    NoConvergence(String),
    #[error("unstable system: {0}")]
    Unstable(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("H-infinity bisection bracket failure: {0}")]
    Bracket(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for faults raised by the numerics rather than by inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Self::NoConvergence(_) | Self::Unstable(_) | Self::NonFinite(_) | Self::Bracket(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
