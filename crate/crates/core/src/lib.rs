//! Desk-scale surgical action-triplet recognition.
//!
//! The crate provides the full model family — a small CNN backbone,
//! weakly-supervised instrument localization, class-activation-guided
//! attention (CAGAM) for verbs and targets, and a multi-head mixed-attention
//! (MHMA) decoder — together with the multi-task losses and the triplet
//! evaluation protocol, all on top of a minimal reverse-mode tensor engine
//! that is verified by finite-difference gradient checks.

pub mod error;
pub mod tensor;

pub mod layers;
pub mod vocab;

pub mod cagam;
pub mod encoder;
pub mod mhma;
pub mod model;

pub mod losses;
pub mod metrics;

pub use error::{CoreError, Result};
pub use tensor::{Graph, NodeId, Padding, PoolMode, Tensor};
