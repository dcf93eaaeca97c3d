//! Experiment harness: config-driven training runs, sweeps, reports and plots.

pub mod analyze;
pub mod artifact;
pub mod config;
pub mod error;
pub mod plot;
pub mod sweep;
pub mod train;

pub use artifact::{train, train_file, RunArtifact};
pub use config::RunConfig;
pub use error::{HarnessError, Result};
pub use train::{run, RunOutput, RunStatus, RunSummary};
