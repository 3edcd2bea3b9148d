use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("ordering error: s = {s} must be strictly less than t = {t}")]
    Ordering { s: f64, t: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible schedule: w*T = {required} exceeds L = {length}")]
    InfeasibleSchedule { required: usize, length: usize },

    #[error("allocation error: {requested} positions requested but only {available} masked")]
    Allocation { requested: usize, available: usize },

    #[error("decoding step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss for sequence {index} of the batch")]
    NonFiniteLoss { index: usize },

    #[error("training error at batch {batch}: {message}")]
    Training { batch: usize, message: String },

    #[error("position {position} out of range (max_positions = {max})")]
    Range { position: usize, max: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_step(step: usize, source: Error) -> Error {
        Error::AtStep {
            step,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
