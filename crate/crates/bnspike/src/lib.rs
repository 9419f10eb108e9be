//! Batch-normalized linear and logistic regression trained by full-batch
//! gradient descent, with closed-form whitened dynamics and evaluators for
//! the onset, self-stabilization and loss bounds of the loss-spike theory.

pub mod config;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod io;
pub mod linear;
pub mod logistic;
pub mod model;
pub mod plot;
pub mod reference;

pub use error::{BnError, Result};
