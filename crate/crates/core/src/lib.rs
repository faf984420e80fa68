//! Adaptive per-parameter L2 regularization in a small deep
//! metric-learning pipeline.
//!
//! Every trainable array in the model carries one raw scalar theta; its
//! regularization factor is `lambda = A * hardsigmoid(theta)`, trained by
//! backpropagation alongside the weights. The crate provides the tensor
//! and tape machinery, the layers and losses, the model topology, a
//! deterministic training loop, a synthetic multi-camera benchmark with
//! mAP/CMC evaluation, and factor-trajectory analytics.
//!
//! The numeric core (tensors, tape, layers, losses, metrics) is generic
//! over the scalar type; the pipeline and all file formats pin f64 via the
//! aliases below.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod model;
pub mod reg;
pub mod scalar;
pub mod stream;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working precision of the pipeline and every file format.
pub type Real = f64;
pub type RealTensor = tensor::Tensor<Real>;
pub type RealTape = tape::Tape<Real>;
