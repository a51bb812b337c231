//! Run manifests: config snapshot, seeds, and SHA-256 of inputs and outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seeds: Vec<u64>,
    /// Command-line arguments other than the config.
    pub args: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    /// Fully resolved config; feeding the manifest back as `--config` reruns it.
    pub config: Option<RunConfig>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl Manifest {
    pub fn new(command: &str, config: Option<&RunConfig>) -> Self {
        Manifest {
            command: command.to_string(),
            seeds: config.map(|c| c.seeds()).unwrap_or_default(),
            args: BTreeMap::new(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            config: config.cloned(),
        }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self, CliError> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(self)
    }

    /// Records `paths` keyed by their location relative to `base`.
    pub fn artifacts<'a>(&mut self, base: &Path, paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<&mut Self, CliError> {
        for p in paths {
            let key = p.strip_prefix(base).unwrap_or(p).display().to_string();
            self.artifacts.insert(key, sha256_file(p)?);
        }
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Validation(format!("manifest: {e}")))?;
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}
