//! Minimal reverse-mode automatic differentiation over dense f64 tensors.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{evaluate, gradients, Graph, NodeId};
pub use ops::OpKind;
pub use optim::Adam;
pub use params::{BoundParams, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
