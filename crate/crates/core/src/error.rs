use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("weight exponent {exponent} exceeds cap {cap}")]
    WeightOverflow { exponent: f64, cap: f64 },
    #[error(
        "negative radicand in kinetic weight (boundary force {force3} not below -c0 = {neg_c0})"
    )]
    NegativeRadicand { force3: f64, neg_c0: f64 },
    #[error("grazing phase point (x3 = {x3}, |vhat3| = {vhat3})")]
    Grazing { x3: f64, vhat3: f64 },
    #[error("singular kernel evaluation: |x - y| = {dist}")]
    Singular { dist: f64 },
    #[error("magnetic kernel requires Y != 0")]
    ZeroY,
    #[error("no boundary exit within horizon {horizon}")]
    NoExitWithinHorizon { horizon: f64 },
    #[error("momentum {speed} exceeded cap {cap}")]
    StepBlowup { speed: f64, cap: f64 },
    #[error("field evaluation failed: {0}")]
    FieldEvalFailure(String),
    #[error("trajectory parameter {s} outside sampled range [{lo}, {hi}]")]
    OutOfRange { s: f64, lo: f64, hi: f64 },
    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),
    #[error("history does not cover time {t} (available from {oldest} to {newest})")]
    HistoryUnderrun { t: f64, oldest: f64, newest: f64 },
    #[error("no convergence after {iters} iterations (last difference {last})")]
    NoConvergence { iters: usize, last: f64 },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("i/o failure: {0}")]
    IoFailure(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::IoFailure(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
