use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use crate::CliError;

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// Record of one invocation. Everything except `duration_secs` is a function
/// of the flags.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub version: String,
    pub duration_secs: f64,
    pub outputs: Vec<PathBuf>,
    pub summary: Value,
}

/// Files written by a command plus a short numeric summary.
#[derive(Debug, Default)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub summary: Value,
    pub seeds: Vec<u64>,
}

impl Outcome {
    pub fn write_json(&mut self, path: &Path, value: &impl Serialize) -> Result<(), CliError> {
        let text = semiconv::json::to_canonical_string(value)?;
        self.write_bytes(path, text.as_bytes())
    }

    pub fn write_bytes(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }
}

impl RunManifest {
    pub fn new(subcommand: &str, config: Value, outcome: Outcome, elapsed: Duration) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            config,
            seeds: outcome.seeds,
            version: VERSION.to_string(),
            duration_secs: elapsed.as_secs_f64(),
            outputs: outcome.outputs,
            summary: outcome.summary,
        }
    }
}

pub fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}
