use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate point cloud: all points coincide")]
    DegenerateCloud,

    #[error("degenerate mask: ratio {ratio} over {patches} patches masks {masked} of them")]
    DegenerateMask {
        patches: usize,
        ratio: f64,
        masked: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}` at node {node}")]
    Numeric { node: usize, op: &'static str },

    #[error("invalid graph state: {0}")]
    State(String),

    #[error("malformed file at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("unsupported format version {found} (reader supports {supported})")]
    Version { found: u32, supported: u32 },

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
