use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VildError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VildError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in objective term `{term}`")]
    Numeric { term: &'static str },

    #[error("all expertise scores are zero; importance distribution is undefined")]
    DegenerateExpertise,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("enumeration of {required} trajectories exceeds budget of {budget}")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("training failed: {0}")]
    Training(String),

    #[error("model assigns zero probability to a support point: {0}")]
    ZeroSupport(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl VildError {
    pub fn shape(msg: impl Into<String>) -> Self {
        VildError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        VildError::Config(msg.into())
    }
}
