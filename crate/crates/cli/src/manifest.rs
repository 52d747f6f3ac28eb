use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

use dualcam::data;

#[derive(Serialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl DatasetRef {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(DatasetRef {
            path: path.to_path_buf(),
            sha256: data::content_hash(path)?,
        })
    }
}

/// Record of one command invocation, written next to its outputs.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub config: Value,
    pub datasets: Vec<DatasetRef>,
    pub checkpoints: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub metrics: Value,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            config: Value::Null,
            datasets: Vec::new(),
            checkpoints: Vec::new(),
            outputs: Vec::new(),
            metrics: Value::Null,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
