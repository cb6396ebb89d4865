//! Small reverse-mode autodiff library: tensors, a recording tape, layers,
//! losses, Adam and checkpoints.

mod gradcheck;
mod layers;
mod loss;
mod optim;
mod params;
mod tape;
mod tensor;


use thiserror::Error;

pub use gradcheck::grad_check;
pub use layers::{init_attention, init_linear, init_mlp, linear, mlp, multi_head_attention};
pub use loss::{cosine_matrix, info_nce_batch, info_nce_loss};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use params::{Checkpoint, ModelParams};
pub use tape::{AttnShape, Tape, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
