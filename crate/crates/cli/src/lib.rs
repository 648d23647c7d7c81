//! Batch driver for the masklift stages: configuration, the per-scene
//! pipeline, and run reports.

pub mod config;
pub mod pipeline;

pub use config::RunConfig;
pub use pipeline::{run_pipeline, run_scene, RunReport, SceneReport};
