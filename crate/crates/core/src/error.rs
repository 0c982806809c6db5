use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("covariance is numerically singular: {0}")]
    SingularCovariance(String),
    #[error("probability {0} outside (0, 1)")]
    InvalidProbability(f64),
    #[error("input covariance is not positive semi-definite")]
    NonPsdInput,
    #[error("alpha must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("trajectory length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite state at stage {stage}")]
    NonFiniteState { stage: usize },
    #[error("unknown environment `{0}`")]
    UnknownEnvironment(String),
    #[error("inference diverged at stage {stage}: {reason}")]
    DivergedInference { stage: usize, reason: String },
    #[error("expected residual underflowed; alpha capped at {capped}")]
    ZeroResidual { capped: f64 },
    #[error("stage {stage} out of range for horizon {horizon}")]
    StageOutOfRange { stage: usize, horizon: usize },
    #[error("operation requires a linear model")]
    LinearOnly,
    #[error("input Hessian not invertible at stage {0}")]
    SingularInput(usize),
    #[error(
        "risk-sensitive recursion lost positive definiteness at stage {stage} (sigma = {sigma})"
    )]
    NeuroticBreakdown { stage: usize, sigma: f64 },
    #[error("line search failed with regularization at its cap")]
    LineSearchFailed,
    #[error("terminal target infeasible: {0}")]
    InfeasibleTarget(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
