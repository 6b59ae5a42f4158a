//! Record of what a command read and wrote.

use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{Context, Result};
use segdebias::datasets::DatasetManifest;
use serde::{Deserialize, Serialize};

pub const RUN_MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const RUN_MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub command: String,
    /// Crate version plus the source revision when it can be determined.
    pub code_version: String,
    pub seed: Option<u64>,
    /// Effective configuration: the training config for `train`, the arguments otherwise.
    pub config: serde_json::Value,
    pub dataset_manifests: Vec<DatasetManifest>,
    pub started_at: String,
    pub finished_at: String,
    /// Every file the command wrote, relative to `output_dir`.
    pub outputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = self.output_dir.join(RUN_MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn code_version() -> String {
    let rev = Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into());
    format!("{} {} ({rev})", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}
