//! Stage pipeline behind the `crepe` binary: configuration, artifact
//! manifests, and the stage implementations themselves.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

pub use config::{load_config, Overrides, PipelineConfig, CACHE_ENV_VAR};
pub use error::{CliError, Result};
pub use stages::{run_all, run_stage, Stage, StageOutcome};
