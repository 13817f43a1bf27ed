//! Desk-scale experiment harness: synthetic scene generation, training of
//! the model variants, evaluation, gradient checking, and vocabulary
//! consistency reporting.

pub mod config;
pub mod error;
pub mod gradsuite;
pub mod optim;
pub mod study;
pub mod synth;
pub mod train;

pub use error::{HarnessError, Result};
