//! Configuration, orchestration and report output for the gluing solver.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{exit, run_export, run_gradient_check, run_solve, run_sweeps};
pub use config::{parse_config, parse_config_with, ConfigError, ConfigErrors, RunConfig};
