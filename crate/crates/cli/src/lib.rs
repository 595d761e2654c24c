//! Command-line experiment runner: dataset generation, training,
//! evaluation, hyperparameter sweeps and record summaries.

pub mod commands;
pub mod config;
pub mod error;
pub mod record;

pub use error::{CliError, CliResult};
