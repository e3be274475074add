//! Command-line front end: run configuration, the staged experiment
//! pipeline and the standalone commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use pipeline::{Pipeline, ResultsReport};
