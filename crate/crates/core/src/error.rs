use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error on {date}: {msg}")]
    Validation { date: String, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite or out-of-range conditional variance inside a filter.
    #[error("numeric error at {at}: {msg}")]
    Numeric { at: String, msg: String },

    #[error("pricing error: {0}")]
    Pricing(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn numeric(at: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            at: at.into(),
            msg: msg.into(),
        }
    }
}
