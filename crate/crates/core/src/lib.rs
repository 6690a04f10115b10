//! Ensemble knowledge distillation with adaptive, gradient-alignment-based
//! teacher weighting for worst-group robustness.
//!
//! The pieces, bottom up:
//! - [`tensor`]: dense arrays, a reverse-mode tape, seeded RNG
//! - [`model`]: MLP classifiers and checkpoints
//! - [`data`]: synthetic spurious-correlation data with (class, attribute) groups
//! - [`losses`]: cross-entropy and temperature-scaled KD losses
//! - [`weighting`]: per-sample teacher weights from gradient alignment with a biased model
//! - [`engine`]: ERM training and every distillation method
//! - [`debias`]: last-layer retraining on group-balanced held-out data
//! - [`eval`]: average, per-group and worst-group accuracy

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod debias;
pub mod engine;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod util;
pub mod weighting;

pub use error::{Error, Result};
