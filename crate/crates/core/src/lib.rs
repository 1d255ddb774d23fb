//! Spatio-temporal traffic forecasting engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode [`Tape`](tensor::Tape) and
//!   finite-difference gradient checks.
//! - [`data`]: traffic series ingestion, distance-kernel adjacency, z-score
//!   normalization, windowing and calendar indices.
//! - [`model`]: the embedding layer, dual-axis attention encoders with cross
//!   spatio-temporal attention, multi-view graph fusion and the prediction
//!   head.
//! - [`metrics`]: MAE loss and MAE/RMSE/MAPE/NSE evaluation.
//! - [`train`]: configuration, Adam, early stopping, checkpoints, the
//!   persistence baseline and the synthetic data generator.

// `!(x >= 0.0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod alloc;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
