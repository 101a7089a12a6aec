//! ECG restoration pretraining, anomaly scoring and evaluation.

pub mod data;
mod error;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod prepare;
pub mod scoring;
pub mod signal;
pub mod training;

pub use error::{CoreError, Result};
