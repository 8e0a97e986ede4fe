//! Batch front end for the `soc-core` pipeline: JSON configuration,
//! stage orchestration and artifact persistence.

pub mod config;
pub mod io;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use pipeline::{PipelineError, Runner, Stage};
