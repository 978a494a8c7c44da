//! Sparse-recovery laboratory: ISTA, learned unrolled solvers (LISTA,
//! DLISTA, A-DLISTA), a variational unrolled solver, coherence diagnostics and
//! an out-of-distribution detector, all on a small reverse-mode engine.

pub mod autodiff;
pub mod checkpoint;
pub mod coherence;
pub mod data;
pub mod error;
pub mod harness;
pub mod ista;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod unfolded;
pub mod vlista;

pub use error::{Error, Result};
pub use tensor::Tensor;
