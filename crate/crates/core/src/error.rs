use thiserror::Error;

use crate::value::Estimator;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum OplError {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("arm {0} has no observations")]
    MissingArm(usize),

    #[error("arm {arm} has {count} observations, {required} needed without a ridge penalty")]
    InsufficientArmData {
        arm: usize,
        count: usize,
        required: usize,
    },

    #[error("training complement of fold {fold} has no observations of arm {arm}; use fewer folds")]
    FoldCoverage { fold: usize, arm: usize },

    #[error("propensity fit did not converge after {iterations} iterations (gradient max-norm {grad_norm:.3e})")]
    Convergence { iterations: usize, grad_norm: f64 },

    #[error("overlap floor {floor} is infeasible with {arms} arms (maximum {max})")]
    InfeasibleFloor { floor: f64, arms: usize, max: f64 },

    #[error("cannot compare a {0} value with a {1} value")]
    EstimatorMismatch(Estimator, Estimator),

    #[error("length mismatch in {what}: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("incremental update for arm {arm} rejected: {reason}")]
    RejectedUpdate { arm: usize, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("reward oracle failed: {0}")]
    Oracle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, OplError>;
