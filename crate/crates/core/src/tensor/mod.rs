//! A small reverse-mode differentiation engine.
//!
//! Values are flat `f64` vectors. A [`Graph`] records operations in the
//! order they are applied and backpropagates through them in exact reverse
//! order. Learnable weights live in [`ParamBlock`]s owned by a
//! [`ParamStore`]; graphs borrow the store read-only and write gradients
//! into a separate [`GradBuffer`].

mod checkpoint;
mod graph;
mod lstm;
mod param;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use graph::{log_sum_exp, Graph, NodeId};
pub use lstm::{lstm_cell, LstmParams};
pub use param::{AdamConfig, GradBuffer, ParamBlock, ParamId, ParamStore};

/// Floor applied inside the log of any modeled probability.
pub const PROB_FLOOR: f64 = 1e-8;

/// `ln(max(p, PROB_FLOOR))` for a log-probability.
pub fn floor_log(log_p: f64) -> f64 {
    log_p.max(PROB_FLOOR.ln())
}
