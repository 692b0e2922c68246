//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is tape based: every operation appends a node to a [`Graph`],
//! and [`Graph::backward`] walks the tape in reverse. Trainable state lives in
//! a [`ParamStore`] outside the graph so that a fresh graph can be built for
//! each step while parameters and optimizer buffers persist.
//!
//! Operations that need a hand-written adjoint can be plugged in through
//! [`CustomOp`] without touching the engine.

mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{CustomOp, GradStore, Graph, Var};
pub use kernels::{conv2d_output_size, BatchNormStats};
pub use optim::{Adam, AdamConfig, Sgd, SgdConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
