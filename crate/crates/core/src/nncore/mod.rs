//! Small deterministic numerical core: tensors, a reverse-mode tape over the
//! handful of layer types the encoder/decoder need, losses, Adam and a
//! finite-difference gradient checker.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod loss;
pub mod optim;
pub mod param;
pub mod tensor;

use thiserror::Error;

pub use attention::multi_head_attention;
pub use gradcheck::{gradcheck, CoordSelection, GradcheckReport};
pub use graph::{Graph, Var};
pub use loss::{ctc_loss, label_smoothed_ce, softmax};
pub use optim::{Adam, LrSchedule};
pub use param::{Gradients, ParamId, ParamSet, Parameter};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("CTC target of length {target_len} needs at least {required} frames, got {frames}")]
    TargetTooLong {
        target_len: usize,
        required: usize,
        frames: usize,
    },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
