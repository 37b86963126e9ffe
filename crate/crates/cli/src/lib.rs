pub mod config;
pub mod pipeline;
pub mod report;

pub use config::EngineConfig;
pub use pipeline::{check, experiment, forward_only, inverse, run, ExperimentKind, Metrics, RunOutput};
