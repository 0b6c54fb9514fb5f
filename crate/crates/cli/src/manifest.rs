//! Run manifests: resolved configuration plus input and output digests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Command;
use crate::failure::Failure;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub precision: String,
    pub threads: usize,
    pub seed: Option<u64>,
    /// The command line as parsed, with every default filled in.
    pub command: Command,
    /// Engine configuration the command resolved to.
    pub config: serde_json::Value,
    /// sha256 of every input file, keyed by absolute path.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every deterministic output, keyed by file name.
    pub outputs: BTreeMap<String, String>,
    /// Files written but not expected to reproduce (timings, checkpoints).
    pub artifacts: Vec<String>,
    /// Command-specific summary (losses, metrics, wall time).
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &Command, threads: usize) -> Self {
        Self {
            tool: "skyprior".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            precision: "f32".into(),
            threads,
            seed: None,
            command: command.clone(),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            artifacts: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        let abs = fs::canonicalize(path).map_err(|e| Failure::io(path, e))?;
        self.inputs.insert(abs.display().to_string(), file_digest(&abs)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), Failure> {
        self.outputs.insert(file_name(path), file_digest(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Failure::format(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Failure::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Failure::format(format!("{}: {e}", path.display())))
    }
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, Failure> {
    Ok(digest(&fs::read(path).map_err(|e| Failure::io(path, e))?))
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Manifest path for a command writing a single file.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    file.with_file_name(name)
}
