//! Configuration-driven experiment runner for the `hyperspde` toolkit.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod run;
pub mod selftest;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use run::{run, Command, RunOutcome, RunRequest};
