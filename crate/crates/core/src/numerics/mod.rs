//! Dense tensors, kernels and reverse-mode differentiation.

pub mod autodiff;
pub mod kernels;
pub mod tensor;

pub use autodiff::{Graph, Gradients, Var};
pub use kernels::{conv2d, scaled_dot_attention, sinusoidal_encoding, softmax, TEMPORAL_MAX_LEN};
pub use tensor::Tensor;
