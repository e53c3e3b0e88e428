use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("differentiation root must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("parameter layout mismatch: {0}")]
    Layout(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("world generation failed: {0}")]
    WorldGeneration(String),

    #[error("invalid task: {0}")]
    Task(String),

    #[error("step called on a finished episode")]
    EpisodeDone,

    #[error("adaptation window broken: segment {index} was not rolled out under the preceding inner update")]
    ChainDiscontinuity { index: usize },

    #[error("segment carries no differentiable evaluation")]
    NotDifferentiable,

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
