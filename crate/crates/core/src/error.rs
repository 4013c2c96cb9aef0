use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid risk specification: {0}")]
    InvalidRisk(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("augmented MDP too large: {0}")]
    TooLarge(String),
    #[error("wrong parameterization: expected {expected}, got {got}")]
    Parameterization { expected: &'static str, got: &'static str },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
