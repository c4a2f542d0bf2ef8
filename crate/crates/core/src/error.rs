use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("out of bounds: ({x:.3}, {y:.3}) lies outside the grid")]
    OutOfBounds { x: f64, y: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("infeasible parameters: {0}")]
    InfeasibleParameters(String),

    #[error("map too dense: {0}")]
    MapTooDense(String),

    #[error("unknown robot `{0}`")]
    UnknownRobot(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backward called before forward")]
    NoForwardCache,

    #[error("architecture invalid: {0}")]
    Architecture(String),

    #[error("model trained for different robot: model `{model}`, requested `{requested}`")]
    RobotMismatch { model: String, requested: String },

    #[error("corrupt model artifact at byte {offset}: {reason}")]
    CorruptArtifact { offset: u64, reason: String },

    #[error("planner failure: {0}")]
    Planner(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("parse error in {what}: {reason}")]
    Parse { what: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
