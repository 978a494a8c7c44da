//! Experiment plumbing: configuration, training dispatch, metrics and the
//! measurement sweep behind the command-line tool.

mod config;
mod metrics;
mod models;
mod sweep;

pub use config::*;
pub use metrics::*;
pub use models::*;
pub use sweep::*;
