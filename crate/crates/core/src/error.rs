use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum SoupError {
    #[error("state already at horizon depth {horizon}")]
    DepthExceeded { horizon: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("tree of {nodes} nodes exceeds the node budget of {budget}")]
    BudgetExceeded { nodes: u128, budget: usize },
    #[error("reward is not finite at row {row}")]
    NonFiniteReward { row: usize },
    #[error("support violation: p[{index}] > 0 where q[{index}] = 0")]
    SupportViolation { index: usize },
    #[error("preference vector is not on the simplex: {0}")]
    SimplexViolation(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {step}: loss became non-finite")]
    Divergence { step: usize },
    #[error("soup constraint violated: beta * sum|lambda| = {lhs} > beta' = {beta_prime}")]
    ConstraintViolation { lhs: f64, beta_prime: f64 },
    #[error("posterior covariance lost positive definiteness")]
    SingularUpdate,
    #[error("feature map does not represent Q* exactly (residual {residual:e})")]
    FeatureNotExact { residual: f64 },
    #[error("negative reward {value} at row {row}; bound certification needs r >= 0")]
    NegativeReward { row: usize, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sanity check failed: {0}")]
    Sanity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SoupError>;
