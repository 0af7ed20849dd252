//! Run manifest: every output directory gets exactly one `manifest.json`
//! recording the command, the effective configuration, the seed, and digests
//! of the input files. Reruns with an equal manifest (timestamp aside) produce
//! byte-identical numeric outputs.

use anyhow::{Context, Result};
use driftfit::datamodel::EstimatorConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: BTreeMap<String, String>,
    pub config: EstimatorConfig,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub artifact_version: String,
    pub timestamp_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: &EstimatorConfig, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            args: BTreeMap::new(),
            config: config.clone(),
            seed,
            inputs: BTreeMap::new(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn arg(mut self, key: &str, value: impl ToString) -> Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("cannot read input {}", path.display()))?;
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.inputs.insert(path.display().to_string(), hex);
        Ok(self)
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).context("serialize manifest")?;
        std::fs::write(out_dir.join("manifest.json"), json + "\n")
            .with_context(|| format!("cannot write manifest in {}", out_dir.display()))?;
        Ok(())
    }
}
