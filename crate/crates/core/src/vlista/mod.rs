//! Variational unrolled solver with per-layer dictionary posteriors, and the
//! posterior-variance out-of-distribution detector built on it.

mod model;
mod ood;
mod train;

pub use model::*;
pub use ood::*;
pub use train::*;
