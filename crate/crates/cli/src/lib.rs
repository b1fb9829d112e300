//! Command-line driver for the Bi-BloSAN encoder: synthetic tasks, training,
//! evaluation, benchmarks, gradient checks and block-length tables.

pub mod commands;
pub mod config;
pub mod error;
pub mod model;
pub mod task;
pub mod train;

pub use config::{Arch, RunConfig, TrainConfig};
pub use error::{CliError, Result};
pub use task::{generate_task, Dataset, Example, TaskKind, TaskSpec};
pub use train::{evaluate, train, TrainOutcome};
