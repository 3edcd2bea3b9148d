use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// What a command read and wrote, with enough context to rerun it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub workers: usize,
    /// The configuration after defaults were filled in, as TOML.
    pub resolved_config: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

/// Digest of `path`, recorded relative to `root` when it lies inside it.
pub fn file_digest(root: &Path, path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path)?;
    let shown = path.strip_prefix(root).unwrap_or(path);
    Ok(FileDigest {
        path: shown.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

impl Manifest {
    pub fn new(command: &str, seed: u64, workers: usize, resolved_config: String) -> Self {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            workers,
            resolved_config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, root: &Path, path: &Path) -> Result<()> {
        self.inputs.push(file_digest(root, path)?);
        Ok(())
    }

    pub fn output(&mut self, root: &Path, path: &Path) -> Result<()> {
        self.outputs.push(file_digest(root, path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
