use thiserror::Error;

/// Errors raised by schedule, model, integrator and sampler operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("time {t} outside schedule domain [{t_min}, {t_max}]")]
    Domain { t: f64, t_min: f64, t_max: f64 },

    #[error("log-SNR {lambda} outside achievable range [{lo}, {hi}]")]
    Range { lambda: f64, lo: f64, hi: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported order {order}; supported range is {min}..{max} inclusive")]
    UnsupportedOrder {
        order: usize,
        min: usize,
        max: usize,
    },

    #[error("index {index} out of range for order {order}")]
    IndexOutOfRange { index: usize, order: usize },

    #[error("non-uniform spacing: {0}")]
    Spacing(String),

    #[error("singular configuration: {0}")]
    Singular(String),

    #[error("insufficient history: need {needed}, have {have}")]
    InsufficientHistory { needed: usize, have: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
