use thiserror::Error;

/// Errors raised by tensor, layer and normalizer operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("{groups} groups do not divide {channels} channels")]
    InvalidGrouping { channels: usize, groups: usize },

    #[error("divisor {0:e} is too close to zero")]
    DegenerateDivisor(f64),

    #[error("batch statistics need at least two samples, got batch {batch} with {per_channel} values per channel")]
    DegenerateBatch { batch: usize, per_channel: usize },

    #[error("degenerate group: {0}")]
    DegenerateGroup(String),

    #[error("weight row {row} is constant and cannot be standardized")]
    DegenerateRow { row: usize },

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidShape(msg.into()))
}
