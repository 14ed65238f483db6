//! File formats, dataset IO, reports and the training/evaluation driver
//! around `hfit-core`.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod golden;
pub mod report;
pub mod run;

pub use error::{Error, Result};
pub use hfit_core as core;
