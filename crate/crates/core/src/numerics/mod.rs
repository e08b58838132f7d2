//! Dense-tensor kernels with reverse-mode autodiff.

mod adam;
mod conv;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use graph::{matmul_raw, transpose_raw, Graph, Tensor};
pub use tensor::TensorData;
