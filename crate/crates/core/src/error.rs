use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("{producer} diverged at t = {time}")]
    Diverged { producer: String, time: f64 },

    #[error("degenerate state: {0}")]
    DegenerateState(String),

    /// Trapezoidal Volterra step whose implicit diagonal is not invertible.
    #[error("step {step} too large for tau = {tau}; use a step below {suggested}")]
    InvalidStep { step: f64, tau: f64, suggested: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
