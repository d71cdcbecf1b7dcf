//! Per-command run manifests.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Tag of the manifest layout and of the artifacts this build writes.
pub const ARTIFACT_VERSION: &str = concat!("mapfuse-", env!("CARGO_PKG_VERSION"));

/// Written next to the outputs of every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, so the run can be repeated.
    pub args: Vec<String>,
    /// SHA-256 of the effective configuration as JSON.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub artifact_version: String,
    pub wall_time_s: f64,
}

/// Hex SHA-256 of the JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("configs serialise");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// `out.csv` → `out.csv.run.json`; a directory gets `run.json` inside it.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        return out.join("run.json");
    }
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.json");
    out.with_file_name(name)
}

impl RunManifest {
    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = manifest_path(out);
        let text = serde_json::to_string_pretty(self).expect("manifests serialise");
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
