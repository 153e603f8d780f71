//! Experiment harness: datasets, metrics, stage orchestration, ablations,
//! and reporting around the compression pipeline in `dnas-core`.

pub mod ablation;
pub mod artifacts;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use error::{HarnessError, Result};
