//! Configuration and stage runner behind the `forge` binary.

pub mod config;
pub mod pipeline;

pub use config::{Preset, RunConfig, Stage};
pub use pipeline::{run_experiment, Manifest};
