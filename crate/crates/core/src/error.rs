use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("input too short: need at least {needed} samples, got {got}")]
    EmptyInput { needed: usize, got: usize },

    #[error("shape mismatch for {name}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("label {0} is not a valid class (expected 0 or 1)")]
    InvalidLabel(u8),

    #[error("dataset contains a single class")]
    SingleClass,

    #[error("missing learning rate for parameter {0}")]
    MissingLearningRate(String),

    #[error("train mode requires a random generator for dropout masks")]
    MissingRng,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unknown model version {0}")]
    UnknownVersion(u64),

    #[error("record outside label-oracle coverage: {0}")]
    OutsideCoverage(String),

    #[error("adaptation batch not ready: {have} of {need} false alarms")]
    BatchNotReady { have: usize, need: usize },

    #[error("monitoring window incomplete: {have} of {need} frames")]
    IncompleteWindow { have: u64, need: u64 },

    #[error("no feasible candidate: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
