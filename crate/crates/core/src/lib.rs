//! From-scratch trainable convolutional neural network engine and
//! surface-defect inspection toolkit.
//!
//! The crate provides dense `f64` tensors, hand-written forward/backward
//! passes for conv / pool / dense / softmax layers, declarative network
//! assembly with shape inference, a deterministic SGD training loop, PGM
//! dataset ingestion plus a synthetic uneven-illumination image generator,
//! bit-exact model serialization, and a finite-difference gradient check
//! harness.
//!
//! With the default `parallel` feature the convolution inner loops and batch
//! evaluation run data-parallel via rayon; disabling the feature selects the
//! sequential fallback with identical results.

pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model_io;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
