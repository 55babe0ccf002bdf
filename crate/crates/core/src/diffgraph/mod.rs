//! Minimal dense-tensor computation core: define-by-run graphs,
//! reverse-mode gradients, Adam.

mod graph;
mod optim;
mod tensor;

pub mod gradcheck;

pub use graph::{GatherPlan, Graph, GraphError, GradientMap, NodeId};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState, OptimError};
pub use tensor::Tensor;
