use thiserror::Error;

use crate::integrator::Trajectory;

/// Errors raised by the kinetics library.
#[derive(Debug, Error)]
pub enum EdgError {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("initial distribution exceeds normalization: tail sum {tail} > M0 = {m0}")]
    NormalizationExceeded { tail: f64, m0: f64 },

    #[error("index {index} out of range for truncation order {n}")]
    IndexOutOfRange { index: usize, n: usize },

    /// The right-hand side produced a non-finite value. The trajectory recorded
    /// up to that point is attached when available.
    #[error("non-finite right-hand side at t = {t}")]
    NonFiniteRhs {
        t: f64,
        partial: Option<Box<Trajectory>>,
    },

    #[error("trajectory too sparse for quadrature: {0}")]
    InsufficientSampling(String),

    #[error("kernel regime does not match the requested analysis: {0}")]
    WrongRegime(String),

    #[error("snapshot grids do not match: {0}")]
    GridMismatch(String),

    #[error("total event rate overflowed")]
    RateOverflow,
}

pub type Result<T> = std::result::Result<T, EdgError>;
