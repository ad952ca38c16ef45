use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("integration diverged at step {step} (t = {time} s): {reason}")]
    IntegrationDiverged {
        step: usize,
        time: f64,
        reason: String,
    },

    #[error("covariance is not positive definite")]
    NotPositiveDefinite,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Lookup(_)
            | Error::Range(_)
            | Error::Shape { .. }
            | Error::Toml(_)
            | Error::Json(_)
            | Error::Csv(_) => 2,
            Error::InsufficientData(_) => 3,
            Error::IntegrationDiverged { .. } | Error::NotPositiveDefinite => 4,
            Error::Io(_) => 1,
        }
    }
}
