//! Experiment runner for `tttlab`: a TOML run configuration, one function
//! per subcommand and the artifact writers they share.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod provenance;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
