//! Co-learning of network parameters and per-class soft labels by
//! alternating minimization, with hard-label, label-smoothing, DisturbLabel
//! and confidence-penalty baselines and penultimate-layer diagnostics.
//!
//! The inner loops (per-sample gradients, per-class soft-label updates,
//! independent training runs) are data-parallel through rayon when the
//! default `parallel` feature is on. Parallel and sequential execution
//! reduce in the same fixed order and give bitwise-identical results.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod labels;
pub mod nn;
pub mod par;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
