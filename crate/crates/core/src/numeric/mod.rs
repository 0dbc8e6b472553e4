//! Numeric substrate: tensors, reverse-mode differentiation, optimizer.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use kernels::{chamfer, layer_norm, selective_scan, softmax_rows, ScanInputs};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
