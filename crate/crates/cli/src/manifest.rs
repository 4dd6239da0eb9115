//! Run manifests: enough to repeat a command and check its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use modality_lab::model::CHECKPOINT_VERSION;
use modality_lab::{LabError, Result};

use crate::config::{ExperimentConfig, Seeds};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub modality_lab: String,
    pub cli: String,
    pub checkpoint_format: u32,
    pub manifest_format: u32,
}

impl Versions {
    pub fn current() -> Self {
        Versions {
            modality_lab: modality_lab::VERSION.to_string(),
            cli: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: CHECKPOINT_VERSION,
            manifest_format: MANIFEST_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub seeds: Seeds,
    pub versions: Versions,
    pub config: ExperimentConfig,
    /// Files read by the command (checkpoint, verdicts, tasks).
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(cfg)?))
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, inputs: Vec<FileDigest>, outputs: Vec<FileDigest>) -> Result<Self> {
        Ok(Manifest {
            command: command.to_string(),
            config_hash: config_hash(cfg)?,
            seeds: cfg.seeds(),
            versions: Versions::current(),
            config: cfg.clone(),
            inputs,
            outputs,
        })
    }

    /// Manifest file name for a command, e.g. `eval-grid.manifest.json`.
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(Self::file_name(&self.command));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| LabError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
