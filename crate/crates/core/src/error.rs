use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite gradient in segment `{segment}`")]
    NonFiniteGradient { segment: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("flow produced a non-finite value at coupling layer {layer}")]
    FlowNonFinite { layer: usize },

    #[error("non-finite self-consistency ratio for observation set {set}")]
    NonFiniteRatio { set: usize },

    #[error("parameter length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sampler acceptance rate {rate:.4} is below 0.01 after warmup; reduce step_scale (currently {step_scale})")]
    LowAcceptance { rate: f64, step_scale: f64 },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("csv error in {file}: {message}")]
    Csv { file: PathBuf, message: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
