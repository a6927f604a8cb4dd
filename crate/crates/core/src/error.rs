use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {data_len} elements")]
    InvalidShape { shape: Vec<usize>, data_len: usize },

    #[error("target index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("non-finite function value {value} at coordinate {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("budget k={k} is invalid for {n} tokens")]
    InvalidBudget { k: usize, n: usize },

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("threshold bisection failed to bracket the budget (residual {residual:e})")]
    BisectionFailed { residual: f64 },

    #[error("gate weight {value} at index {index} lies outside [0, 1]")]
    GateOutOfRange { index: usize, value: f64 },

    #[error("attention mask row {row} allows no positions")]
    EmptyMaskRow { row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("downstream pretraining reached accuracy {accuracy:.4}, below target {target:.4}")]
    PretrainFailed { accuracy: f64, target: f64 },

    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
