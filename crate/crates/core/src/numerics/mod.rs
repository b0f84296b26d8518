//! Dense tensors, reverse-mode autodiff, and a dense linear solver.

pub mod conv;
mod graph;
mod linalg;
mod tensor;

pub use conv::{ConvGeometry, PoolGeometry};
pub use graph::{Gradients, Graph, NodeId};
pub use linalg::{linear_solve, PIVOT_TOLERANCE};
pub use tensor::Tensor;
