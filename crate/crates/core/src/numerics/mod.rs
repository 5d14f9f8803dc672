//! Dense tensors, forward kernels, and the reverse-mode autodiff tape.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use kernels::{activate, dot, layer_norm, masked_softmax, matmul, matmul_ex, rope_partial, row_norms, Activation};
pub use tensor::Tensor;
