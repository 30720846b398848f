use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;

pub const SOLVER_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// JSON document written by every subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct ReportEnvelope<'a, P: Serialize> {
    pub command: &'a str,
    pub solver_version: &'a str,
    pub timestamp: String,
    pub exit_code: i32,
    pub config: &'a RunConfig,
    pub payload: &'a P,
}

impl<'a, P: Serialize> ReportEnvelope<'a, P> {
    pub fn new(command: &'a str, config: &'a RunConfig, exit_code: i32, payload: &'a P) -> Self {
        Self {
            command,
            solver_version: SOLVER_VERSION,
            timestamp: chrono::Utc::now().to_rfc3339(),
            exit_code,
            config,
            payload,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Writes through a temporary file and a rename so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}
