use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("infeasible bounds at row {row}: l = {lower} > u = {upper}")]
    InfeasibleBounds { row: usize, lower: f64, upper: f64 },

    #[error("singular KKT matrix: pivot {index} has magnitude {value:e}")]
    SingularKkt { index: usize, value: f64 },

    #[error("solver setup failed: {0}")]
    Setup(String),

    #[error("iterates diverged at iteration {iter}")]
    Divergence { iter: usize },

    #[error("policy error: {0}")]
    Policy(String),

    #[error("reference solve failed for {name}: {reason}")]
    ReferenceFailure { name: String, reason: String },

    #[error(
        "theory violation at step {step}: {what} (magnitude {magnitude:e}, allowed {allowed:e})"
    )]
    TheoryViolation {
        step: usize,
        what: String,
        magnitude: f64,
        allowed: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
