use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    TrainingDiverged { epoch: usize, step: usize, detail: String },

    #[error("checkpoint version mismatch: {0}")]
    Version(String),

    #[error("malformed archive: {0}")]
    Archive(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("output directory {0} is locked by another experiment")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidShape(format!($($arg)*))
    };
}

pub(crate) use shape_err;
