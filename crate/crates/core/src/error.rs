use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CoffeeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoffeeError {
    #[error("schema violation: {0}")]
    Schema(String),

    #[error("invalid window: end {end} <= start {start}")]
    InvalidWindow { start: i64, end: i64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("id {id} out of range for vocabulary of size {size}")]
    OutOfRange { id: usize, size: usize },

    #[error("attention over an empty sequence")]
    EmptySequence,

    #[error("non-finite gradient in parameter `{0}`")]
    PoisonedGradient(String),

    #[error("training aborted at step {step}: {source}")]
    TrainingAborted {
        step: usize,
        #[source]
        source: Box<CoffeeError>,
    },

    #[error("causality violation: event at {event_ts} is after request at {request_ts}")]
    Causality { event_ts: i64, request_ts: i64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("attribute budget exceeded: event already has {0} attributes")]
    AttributeBudget(usize),

    #[error("split error: {0}")]
    Split(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("comparability error: {0}")]
    Comparability(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CoffeeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoffeeError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs (files, configs, ids) rather than
    /// by a broken internal invariant.
    pub fn is_data_error(&self) -> bool {
        !matches!(
            self,
            CoffeeError::PoisonedGradient(_)
                | CoffeeError::TrainingAborted { .. }
                | CoffeeError::Causality { .. }
                | CoffeeError::EmptySequence
        )
    }
}
