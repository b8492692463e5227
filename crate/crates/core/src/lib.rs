//! Gradient-based meta-learning (MAML and the stabilized variant with
//! multi-step loss, derivative-order annealing, per-step batch-norm,
//! learned per-layer per-step inner learning rates and cosine-annealed
//! meta-optimizer) on top of a small second-order autodiff engine.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod meta;
pub mod network;

pub use error::{Error, Result};
