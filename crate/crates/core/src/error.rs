use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("exact enumeration needs {required:.3e} terms, budget is {limit:.3e}")]
    EnumerationBudget { required: f64, limit: f64 },
    #[error("density {density} exceeds envelope {envelope} at {point:?}")]
    InvalidEnvelope { point: Vec<f64>, density: f64, envelope: f64 },
    #[error("variance is zero or numerically vanishing ({0:e})")]
    VanishingVariance(f64),
    #[error("kernel is not degenerate: residual {residual:e} exceeds tolerance {tolerance:e}")]
    NonDegenerate { residual: f64, tolerance: f64 },
    #[error("covariance matrix is indefinite: smallest eigenvalue {0:e}")]
    IndefiniteCovariance(f64),
    #[error("too few samples: got {got}, need at least {need}")]
    TooFewSamples { got: usize, need: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid index set: {0}")]
    InvalidIndex(String),
    #[error("configuration errors: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
