//! Batch pipeline around the `tasgen-core` models: configuration, stage
//! orchestration, evaluation metrics, robustness protocols and reports.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod harmonic;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod robustness;

pub use error::{HarnessError, Result};
