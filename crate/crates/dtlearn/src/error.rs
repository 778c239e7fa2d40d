use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A state entry, coefficient, or intermediate became NaN/Inf.
    #[error("non-finite value for `{symbol}` in {context}")]
    NonFinite { symbol: String, context: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of range: {0}")]
    Index(String),

    /// State magnitude exceeded the blow-up guard during integration.
    #[error("simulation diverged at t={time}: {message}")]
    Divergence { time: f64, message: String },

    /// Training loss left the finite range.
    #[error("training diverged at epoch {epoch}; last finite loss {last_loss}")]
    TrainingDiverged { epoch: usize, last_loss: f64 },

    /// A measured closure failed; wall time up to the failure is attached.
    #[error("measured run failed after {runtime_s:.3}s: {source}")]
    MeasuredFailure {
        runtime_s: f64,
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn non_finite(symbol: &str, context: &str) -> Self {
        Error::NonFinite {
            symbol: symbol.to_string(),
            context: context.to_string(),
        }
    }
}
