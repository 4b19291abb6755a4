//! Per-stage `manifest.json`: input and output hashes, seed and version.
//! Downstream stages refuse to run when an upstream manifest or one of its
//! outputs is missing or has changed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    /// SHA-256 of the resolved configuration text.
    pub config_sha256: String,
    /// Relative path (or absolute, for external inputs) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Paths relative to the run directory.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

pub fn path_of(stage: &str) -> PathBuf {
    Path::new(stage).join("manifest.json")
}

impl Manifest {
    pub fn new(stage: &str, seed: u64, config_text: &str) -> Self {
        Self {
            stage: stage.to_string(),
            version: VERSION.to_string(),
            seed,
            config_sha256: sha256_bytes(config_text.as_bytes()),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    /// Records `rel` (relative to `root`) as an input.
    pub fn input(&mut self, root: &Path, rel: &str) -> Result<()> {
        self.inputs.insert(rel.to_string(), sha256_file(&root.join(rel))?);
        Ok(())
    }

    pub fn external_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, root: &Path, rel: &str) -> Result<()> {
        self.outputs.insert(rel.to_string(), sha256_file(&root.join(rel))?);
        Ok(())
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(path_of(&self.stage));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        crate::formats::write_text(&path, &text)
    }

    /// Loads `<root>/<stage>/manifest.json` and checks that every listed
    /// output still exists with the recorded hash.
    pub fn require(root: &Path, stage: &str) -> Result<Self> {
        let path = root.join(path_of(stage));
        if !path.exists() {
            return Err(CliError::Missing(path));
        }
        let text = crate::formats::read_text(&path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))?;
        for (rel, hash) in &m.outputs {
            let p = root.join(rel);
            if sha256_file(&p)? != *hash {
                return Err(CliError::Stale(p));
            }
        }
        Ok(m)
    }
}
