//! Dynamic sample generation from statically labelled satellite time series.
//!
//! Pipeline: a hierarchical temporal-spectral VAE ([`vae`]) learns normal
//! patterns around a labelled anchor; [`anomaly`] scores, thresholds and
//! attributes deviations; [`relabel`] turns attributed anomalies into
//! per-step labels.

pub mod anomaly;
pub mod data;
pub mod embedding;
pub mod error;
pub mod nn;
pub mod relabel;
pub mod vae;

pub use error::{Error, Result};
