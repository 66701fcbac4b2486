use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DseError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DseError {
    #[error("mask belongs to graph `{mask}` but was applied to `{graph}`")]
    Identity { mask: String, graph: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("invalid graph `{id}`: {reason}")]
    InvalidGraph { id: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Training {
        epoch: usize,
        step: usize,
        message: String,
    },

    #[error("optimisation failed at step {step}: {message}")]
    Optimization { step: usize, message: String },

    #[error("all adjustment-pool members have zero posterior probability")]
    DegenerateWeights,

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
