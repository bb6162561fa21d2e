//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Schema sampling could not find a new graph-distinct class schema.
    #[error("schema space exhausted after {retries} rejected samples")]
    SchemaSpaceExhausted { retries: usize },

    /// A graph exceeds the exact-GED node bound.
    #[error("graph too large for exact edit distance: {nodes} nodes (max {max})")]
    GraphTooLarge { nodes: usize, max: usize },

    /// Prototype selection over an empty class.
    #[error("cannot select a prototype from an empty class")]
    EmptyClass,

    /// Knowledge-base update with an already-known class.
    #[error("class {class_id} already present in the knowledge base")]
    DuplicateClass { class_id: u32 },

    /// Classification against an empty knowledge base.
    #[error("knowledge base is empty")]
    EmptyKnowledgeBase,

    /// Tensor or raster dimensions do not match expectations.
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    /// A loss or gradient became NaN/inf; carries the per-epoch trace so far.
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize, trace: Vec<f64> },

    /// An accuracy matrix is missing required entries.
    #[error("accuracy matrix incomplete: missing ({task}, {after_task})")]
    IncompleteMatrix { task: usize, after_task: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
