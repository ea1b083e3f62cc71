//! Spiking neural networks with self-prediction enhanced neurons, trained by
//! explicit backpropagation through time with surrogate gradients.
//!
//! The crate is organised bottom-up:
//!
//! * [`numeric`]: dense vectors and matrices, a seeded generator, the loss.
//! * [`neuron`]: single-step IF/LIF/PLIF/CLIF dynamics and the prediction current.
//! * [`bptt`]: layer traces and the reverse-time backward pass.
//! * [`gradcheck`]: finite-difference verification of the backward pass.
//! * [`model`]: layered classifiers, batch gradients, optimizers.
//! * [`checkpoint`]: plain-text parameter files.
//! * [`data`]: IDX files, row framing, a synthetic temporal task, batching.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bptt;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod neuron;
pub mod numeric;

pub use error::{Error, Result};
