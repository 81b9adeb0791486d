//! File formats, stage configs, run manifests, reports and the `reprobe`
//! command line around [`reprobe_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fixtures;
pub mod fsutil;
pub mod manifest;
pub mod report;

pub use error::{LabError, Result};
