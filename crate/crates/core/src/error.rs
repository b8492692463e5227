use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are invalid for the named operation.
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("structural error: {0}")]
    Structure(String),

    /// The first node whose output contained NaN or infinity.
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Meta-loss went non-finite; carries the per-step target losses
    /// (averaged over the task batch) for diagnosis.
    #[error("meta-loss diverged (per-step target losses {per_step:?})")]
    Diverged { per_step: Vec<f64> },

    #[error("ingestion error in {path}: {msg}")]
    Ingest { path: PathBuf, msg: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error at byte offset {offset}: {msg}")]
    Checkpoint { offset: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }
}
