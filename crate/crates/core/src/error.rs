use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("simulation blew up at step {step} (t = {time}, x = {state})")]
    BlowUp { step: usize, time: f64, state: f64 },

    #[error("point (t = {t}, x = {x}) lies outside the value grid")]
    OutOfDomain { t: f64, x: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("divergence at iteration {iteration}: parameters {params:?}")]
    Divergence { iteration: usize, params: Vec<f64> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short machine-readable tag, used by the CLI error object.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Evaluation(_) => "evaluation",
            Error::BlowUp { .. } => "blow_up",
            Error::OutOfDomain { .. } => "out_of_domain",
            Error::Config(_) => "config",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Divergence { .. } => "divergence",
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => "io",
        }
    }
}
