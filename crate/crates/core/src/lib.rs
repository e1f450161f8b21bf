//! Two-tower stereo depth estimation, end to end: a dense-tensor autodiff
//! engine sized for the network, the twin-encoder model itself, synthetic
//! rectified stereo data with ground truth, training with Adam, and the
//! standard depth-metric suite.

pub mod data;
pub mod gradcheck;
pub mod model;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use tensor::{GradGraph, Tensor, TensorError, TensorId};
