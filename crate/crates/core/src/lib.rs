pub mod adversarial;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod composer;
pub mod config;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod pipelines;

pub use error::{Error, Result};
