//! Hybrid point cloud classifier: farthest-point patchification, a
//! self-attention block, and a stack of bidirectional selective state space
//! blocks, trained end to end with a small reverse-mode autodiff engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`numeric`]: dense `f64` tensors, the gradient tape, AdamW and the
//!   cosine schedule, and a finite-difference gradient checker.
//! - [`pointops`]: farthest point sampling, k-NN grouping, center resorting,
//!   normalization and augmentation.
//! - [`blocks`]: patch embedder, positional encoding, multi-head attention,
//!   the selective scan and the bidirectional SSM block.
//! - [`model`]: the assembled classifier, masked-autoencoder pretraining,
//!   the training loop and the checkpoint format.
//! - [`data`]: synthetic shapes, XYZ files and dataset splits.

// Kernels walk several flat buffers in lockstep; index loops read better.
#![allow(clippy::needless_range_loop)]

pub mod blocks;
pub mod data;
mod error;
pub mod model;
pub mod numeric;
pub mod pointops;

pub use error::{Error, Result};
pub use numeric::{Tape, Tensor, Var};
pub use pointops::{PatchSet, PointCloud};
