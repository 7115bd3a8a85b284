use std::fmt;

/// Snapshot of the batch that produced a non-finite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub advantage_min: f64,
    pub advantage_max: f64,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ratio in [{:.6e}, {:.6e}], advantage in [{:.6e}, {:.6e}]",
            self.ratio_min, self.ratio_max, self.advantage_min, self.advantage_max
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The caller broke an API contract (bad shape, step after termination, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite loss during training: {0}")]
    NonFiniteLoss(Divergence),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}
