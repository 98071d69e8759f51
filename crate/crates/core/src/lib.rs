//! Weakly supervised color naming.
//!
//! Two branches share one input image: a shallow fully convolutional
//! color-naming network predicts a per-pixel distribution over color names,
//! and an attention network predicts a single non-negative relevance map.
//! A modulation layer multiplies the two, and global average pooling plus a
//! softmax turns the result into an image-level prediction that can be
//! trained from one color label per image.

// NaN must fail range checks, so negated comparisons are intentional.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod tensor;

mod kernels;

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod modulation;
pub mod nets;
pub mod optim;
pub mod params;
pub mod saliency;
pub mod selfcheck;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
