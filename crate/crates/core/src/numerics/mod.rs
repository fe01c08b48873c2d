//! Dense tensors, reverse-mode autodiff, a dense 2-D DFT pair and first-order optimizers.

pub mod dft;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod tensor;
pub mod topk;

pub use dft::{dft2, idft2, ComplexGrid, DftBasis};
pub use graph::{softmax_rows, Gradients, Graph, Var};
pub use optim::{adam_step, Optimizer, OptimizerKind, OptimizerState};
pub use tensor::{cosine, Tensor};
pub use topk::{topk_indices, topk_mask};
