//! Dense-tensor autodiff substrate: row-major f32 tensors on a per-step
//! tape, reductions accumulated in f64, plus Adam and checkpointing.

mod adam;
mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod kernels;
mod ops;
mod rng;
mod tape;

pub use adam::{AdamState, ParamStore};
pub use checkpoint::{load_params, read_tensors, save_params, write_tensors};
pub use rng::Rng;
pub use tape::{GradStore, Gradients, NodeId, ParamId, Tape, Value};

#[derive(Debug, thiserror::Error)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`; step rejected")]
    NonFiniteGradient(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
}
