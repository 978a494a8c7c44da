//! Minimal reverse-mode differentiation over dense tensors.
//!
//! Graphs are built once (symbolically) and then evaluated many times with
//! different bound inputs, which is how the unrolled solvers are trained:
//! one graph per model, one forward/backward per datum.

mod graph;

pub use graph::{
    kl_entry, sigmoid, softplus, softplus_inv, CustomOp, Gradients, Graph, NodeId, Op, OpKind,
};
