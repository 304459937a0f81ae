//! Pipeline orchestration: configuration, run manifests, and the
//! simulate/rates/train/eval/report stages behind the `rgc` binary.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

pub use config::{ExperimentConfig, Protocol};
pub use error::{PipelineError, Result};
pub use stages::Runner;
