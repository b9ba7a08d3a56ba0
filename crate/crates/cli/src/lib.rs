//! Command-line front end for taylorfold.
//!
//! Each verb reads a [`config::RunConfig`] assembled from a preset, an
//! optional config file and flags, echoes it to `<out>/config.echo`, and
//! writes its artifacts under `--out`.

pub mod cli;
pub mod commands;
pub mod config;

pub use commands::{CliError, ExitCode};
pub use config::{ConfigError, Preset, RunConfig};
