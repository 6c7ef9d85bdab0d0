//! Minimal dense feed-forward classifier with hand-written gradients, the
//! tempered softmax, and the combined hard/soft distillation loss.
//!
//! All arithmetic is `f64`. Weight matrices are row-major `(out_dim, in_dim)`.
//! Hidden layers use `tanh`; the output layer is affine and produces logits.

mod data;
pub mod format;
mod loss;
mod matrix;
mod model;
mod train;

pub use data::{make_blobs, partition, split_holdout, Batch, Dataset, EpochSampler};
pub use loss::{
    hard_loss, hard_loss_with, kd_loss, kd_loss_with, log_softmax, softmax, tempered_softmax,
    SoftLabelBatch, TrainConfig,
};
pub use matrix::Matrix;
pub use model::{Gradients, Model};
pub use train::{evaluate, evaluate_with, pretrain_teacher, sgd_step, train_hard};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// Student architecture used when nothing else is configured: one hidden layer of 64.
pub const DEFAULT_STUDENT_HIDDEN: &[usize] = &[64];
/// Teacher architecture used when nothing else is configured: two hidden layers of 256.
pub const DEFAULT_TEACHER_HIDDEN: &[usize] = &[256, 256];

/// `[input, hidden..., classes]`.
pub fn layer_dims(input: usize, hidden: &[usize], classes: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(classes);
    dims
}
