use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum CrispError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("missing propensities: fit or supply p_obs before estimating")]
    MissingPropensity,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CrispError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CrispError {
    CrispError::InvalidArgument(msg.into())
}
