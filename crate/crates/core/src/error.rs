use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("no data")]
    NoData,
    #[error("no density for bandwidth 0")]
    NoDensity,
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("grid does not match the estimator binning")]
    GridMismatch,
    #[error("degenerate trajectory: only {usable} usable points after burn-in")]
    DegenerateTrajectory { usable: usize },
    #[error("diverged: non-finite parameters at step {step}")]
    Diverged { step: u64 },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
