use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::commands::CliError;

/// Everything needed to rerun an invocation, written before any work starts.
#[derive(Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    /// Fully resolved config, defaults included.
    pub config: serde_json::Value,
    /// Path arguments and flags that are not part of the config.
    pub args: serde_json::Value,
    /// SHA-256 of each input file's raw bytes.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Core(camfusion::Error::Data(format!("{}: {e}", path.display()))))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(
        subcommand: &str,
        seed: Option<u64>,
        config: &impl Serialize,
        args: serde_json::Value,
    ) -> Result<Self, CliError> {
        Ok(Self {
            subcommand: subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config).map_err(camfusion::Error::from)?,
            args,
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, CliError> {
        let path = out_dir.join("run_manifest.json");
        let mut text = serde_json::to_string_pretty(self).map_err(camfusion::Error::from)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(camfusion::Error::from)?;
        Ok(path)
    }
}
