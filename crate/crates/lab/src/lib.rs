//! Data generation, two-stage training, rollouts and analysis around the
//! `aroma-core` models, plus the `aroma-lab` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod generate;
pub mod manifest;
pub mod model;
pub mod plot;
pub mod training;

pub use error::{LabError, LabResult};
