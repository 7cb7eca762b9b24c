//! Orientation-aware attention pooling with a learnable line direction,
//! a small reverse-mode autodiff engine to train it, and a synthetic
//! micro-motion benchmark.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod init;
pub mod model;
pub mod orient;
pub mod params;
pub mod snapshot;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
