use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
struct InputRecord {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'a str,
    version: &'a str,
    subcommand: &'a str,
    seed: Option<u64>,
    inputs: &'a [InputRecord],
    config: &'a serde_json::Value,
    artifacts: &'a [String],
}

/// Output directory of one run. Artifacts are recorded as they are written
/// and listed in `manifest.json` by [`Output::finish`].
pub struct Output {
    dir: PathBuf,
    subcommand: &'static str,
    seed: Option<u64>,
    inputs: Vec<InputRecord>,
    config: serde_json::Value,
    artifacts: Vec<String>,
}

impl Output {
    pub fn new(dir: &Path, subcommand: &'static str, seed: Option<u64>) -> Self {
        Output {
            dir: dir.to_path_buf(),
            subcommand,
            seed,
            inputs: Vec::new(),
            config: serde_json::Value::Null,
            artifacts: Vec::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            sha256: Sha256::digest(&data).iter().map(|b| format!("{b:02x}")).collect(),
            bytes: data.len() as u64,
        });
        Ok(())
    }

    pub fn set_config(&mut self, config: &impl Serialize) -> Result<()> {
        self.config = serde_json::to_value(config)?;
        Ok(())
    }

    fn ensure_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))
    }

    /// Path of a new artifact inside the output directory.
    pub fn path(&mut self, name: &str) -> Result<PathBuf> {
        self.ensure_dir()?;
        self.artifacts.push(name.to_string());
        Ok(self.dir.join(name))
    }

    /// Record an artifact written somewhere else (an explicit `--json` path).
    pub fn external(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let path = self.path(name)?;
        write_json(&path, value)?;
        Ok(path)
    }

    pub fn finish(self) -> Result<()> {
        self.ensure_dir()?;
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand: self.subcommand,
            seed: self.seed,
            inputs: &self.inputs,
            config: &self.config,
            artifacts: &self.artifacts,
        };
        write_json(&self.dir.join("manifest.json"), &manifest)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
