//! Command-line workflow: simulate, train, sample, diagnose and compare,
//! driven by one JSON config and one seed.

pub mod commands;
pub mod config;

pub use commands::{run_command, Cli, Command};
pub use config::{parse_config, AmortizerKind, WorkflowConfig};
