//! Raw numeric kernels over flat NHWC buffers.
//!
//! Every kernel splits work so that each output element is produced by a
//! single task with a fixed summation order, which keeps results identical
//! for any thread count.

pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;
