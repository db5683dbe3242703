//! Differentiable Bayesian filters with learnable models.
//!
//! The crate implements extended, unscented, Monte-Carlo unscented and
//! particle filters as chains of taped tensor operations, so that sensor,
//! process and noise models can be trained end-to-end through the filter.

pub mod autodiff;
pub mod discworld;
pub mod error;
pub mod filters;
pub mod gaussian;
pub mod harness;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
