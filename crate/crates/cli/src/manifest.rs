//! Per-run bookkeeping written beside every output.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::{Classify, CliResult, Kind};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    /// SHA-256 of the config file bytes, or of the built-in default
    /// configuration when no file was given.
    pub config_digest: String,
    pub seed: u64,
    pub tool_version: String,
    pub outputs: Vec<String>,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Path of the manifest that accompanies `output`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub struct Recorder {
    command: String,
    config_path: Option<String>,
    config_digest: String,
    seed: u64,
    started: SystemTime,
    clock: Instant,
}

impl Recorder {
    pub fn start(command: &str, config_path: Option<&Path>, config_digest: String, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_path: config_path.map(|p| p.display().to_string()),
            config_digest,
            seed,
            started: SystemTime::now(),
            clock: Instant::now(),
        }
    }

    /// Writes the manifest beside `outputs[0]`.
    pub fn finish(self, outputs: &[&Path]) -> CliResult<PathBuf> {
        let m = RunManifest {
            command: self.command,
            config_path: self.config_path,
            config_digest: self.config_digest,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            started_unix_secs: self
                .started
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_clock_secs: self.clock.elapsed().as_secs_f64(),
        };
        let path = manifest_path(outputs[0]);
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(&path, json + "\n").kind_with(Kind::Runtime, || format!("writing {}", path.display()))?;
        Ok(path)
    }
}
