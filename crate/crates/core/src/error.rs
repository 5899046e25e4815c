//! Error type shared across the simulator.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid label {label}, model has {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("non-finite value produced by {layer}")]
    NumericOverflow { layer: String },

    #[error("sample {sample} has no pixel of class {class}")]
    ClassAbsent { sample: u64, class: usize },

    #[error("degenerate (zero) class-{class} gradient for sample {sample}")]
    DegenerateGradient { sample: u64, class: usize },

    #[error("client {client} diverged at round {round}, batch {batch} (non-finite loss)")]
    Diverged { client: usize, round: usize, batch: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("dataset format error: {0}")]
    Dataset(String),

    #[error("method not applicable: {0}")]
    NotApplicable(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}
