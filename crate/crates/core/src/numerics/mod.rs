//! Dense tensors, reverse-mode differentiation, parameter containers and
//! first-order optimizers.

pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Var};
pub use nn::{Activation, Linear, Mlp};
pub use optim::{build_optimizer, Adam, Optimizer, OptimizerKind, Sgd};
pub use params::{ParamSet, ParamSnapshot};
pub use tensor::{Tensor, TensorRecord};
