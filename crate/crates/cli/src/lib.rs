//! Configuration, commands and file formats for the `regimelq` tool.

pub mod commands;
pub mod config;
pub mod io;

pub use commands::{run_command, CliError, Command};
pub use config::{parse_config, parse_config_str, ConfigError, RunConfig};
