//! Minimal reverse-mode tensor library: parameter stores, a recording tape,
//! Adam and a binary checkpoint format.

mod adam;
mod checkpoint;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader, CHECKPOINT_FORMAT};
pub use graph::{sigmoid, softmax_in_place, Graph, SeqShape, Var};
pub use params::{GradStore, Init, Layout, ParamBuilder, ParamId, ParamStore, Segment};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("shape mismatch in {0}")]
    Shape(String),
    #[error("unknown parameter segment `{0}`")]
    UnknownSegment(String),
    #[error("duplicate parameter segment `{0}`")]
    DuplicateSegment(String),
    #[error("initializer: {0}")]
    Init(String),
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[cfg(test)]
mod tests;
