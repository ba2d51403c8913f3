//! Dense tensors, differentiable primitives, AdamW and the learning-rate schedule.

mod graph;
mod optim;
mod schedule;
mod tensor;

pub use graph::{gelu_scalar, log_sigmoid_scalar, sigmoid_scalar, Gradients, Graph, Mask, Var};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::LrSchedule;
pub use tensor::{dot, l2_normalize, pairwise_sum, Tensor};
