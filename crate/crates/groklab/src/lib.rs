//! Grokking laboratory: small-model training with robustness and
//! matrix-information instrumentation.

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod runlog;
pub mod tensor;
pub mod theory;
pub mod train;
pub mod verify;

pub use error::{GrokError, Result};
