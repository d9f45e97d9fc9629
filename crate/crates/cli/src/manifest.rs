use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult, Command};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command run, sufficient to re-execute it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// The parsed command with absolute paths.
    pub arguments: serde_json::Value,
    pub calib_hash: String,
    pub seed: Option<u64>,
    /// Output files, relative to the output directory.
    pub artifacts: Vec<PathBuf>,
    pub duration_ms: f64,
}

impl RunManifest {
    pub fn new(
        command: &Command,
        calib_hash: String,
        seed: Option<u64>,
        artifacts: Vec<PathBuf>,
        duration: Duration,
    ) -> CliResult<Self> {
        Ok(RunManifest {
            command: command.name().to_string(),
            arguments: serde_json::to_value(command)?,
            calib_hash,
            seed,
            artifacts,
            duration_ms: duration.as_secs_f64() * 1e3,
        })
    }

    pub fn command(&self) -> CliResult<Command> {
        let cmd: Command = serde_json::from_value(self.arguments.clone())?;
        if cmd.name() != self.command {
            return Err(CliError::Usage(format!(
                "manifest names {} but records arguments for {}",
                self.command,
                cmd.name()
            )));
        }
        Ok(cmd)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
