use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent user input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("subject '{subject}': observation time {time} is not on the coefficient grid")]
    OffGrid { subject: String, time: f64 },

    #[error("zero kernel mass at grid point t = {time}")]
    ZeroKernelMass { time: f64 },

    #[error("working covariance of subject {subject} is not positive definite")]
    NotPositiveDefinite { subject: usize },

    #[error("degenerate covariance estimation: {0}")]
    DegenerateCovariance(String),

    #[error("step size underflow ({step:e}) in proximal gradient iterations; problem is ill-conditioned")]
    StepSizeUnderflow { step: f64 },

    #[error("all penalty weights are zero; lambda_max is undefined")]
    ZeroWeights,

    #[error("bootstrap failed: {failures} of {attempts} resamples could not be refit")]
    BootstrapFailure { failures: usize, attempts: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the caller's data or configuration rather
    /// than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::OffGrid { .. }
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
