//! Command-line front end: JSON config in, CSV reports out.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod criteria;
pub mod output;

use std::fmt;

/// Failure classes, mapped onto exit codes by [`CliError::exit_code`].
#[derive(Debug)]
pub enum CliError {
    /// Unreadable, malformed or out-of-range configuration.
    Config(String),
    /// A computation or output failure.
    Compute(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Compute(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Compute(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<chiptrap::Error> for CliError {
    fn from(e: chiptrap::Error) -> Self {
        CliError::Compute(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Compute(format!("i/o: {e}"))
    }
}

/// The configuration `reproduce` runs when none is given.
pub const BASELINE_CONFIG: &str = include_str!("../configs/baseline.json");

/// Reads and validates a config file; every failure is a config error.
pub fn load_config(path: Option<&std::path::Path>) -> Result<config::RunConfig, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
        None => BASELINE_CONFIG.to_owned(),
    };
    config::RunConfig::from_json(&text).map_err(CliError::Config)
}
