use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time {t} is outside the admissible range {range}")]
    TimeOutOfRange { t: f64, range: &'static str },

    #[error("conditional map is singular at t = {t}")]
    SingularMap { t: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("all importance weights vanished")]
    DegenerateWeights,

    #[error("rejection sampling accepted no samples")]
    EmptyAcceptance,

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("quadrature failed: {0}")]
    Quadrature(String),

    #[error("integration diverged at t = {t}")]
    Divergence { t: f64 },

    #[error("integration of sample {index} diverged at t = {t}")]
    SampleDivergence { index: usize, t: f64 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown name: {0}")]
    UnknownName(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::DegenerateWeights
                | Error::EmptyAcceptance
                | Error::Quadrature(_)
                | Error::Divergence { .. }
                | Error::SampleDivergence { .. }
                | Error::NonFiniteLoss { .. }
                | Error::SingularMap { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
