//! Content-hash manifest of a run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use casal_core::container::sha256_file;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Relative path (or `config`) to content hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    /// Effective configuration, written before any stage runs.
    pub config: serde_json::Value,
    /// Environment overrides applied on top of the config file.
    pub env_overrides: Vec<(String, String)>,
    pub stages: BTreeMap<String, StageRecord>,
    /// Every file in the run directory except this manifest.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Re-hashes the whole directory into `artifacts`.
    pub fn refresh_artifacts(&mut self, dir: &Path) -> Result<()> {
        self.artifacts = hash_tree(dir, dir)?
            .into_iter()
            .filter(|(k, _)| k != MANIFEST_FILE)
            .collect();
        Ok(())
    }
}

/// Files under `path` (a file or a directory), keyed relative to `root`,
/// with `/` separators.
pub fn hash_tree(root: &Path, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            for entry in std::fs::read_dir(&p)? {
                stack.push(entry?.path());
            }
        } else if p.is_file() {
            out.insert(relative(root, &p), sha256_file(&p)?);
        }
    }
    Ok(out)
}

pub fn relative(root: &Path, p: &Path) -> String {
    let rel: PathBuf = p.strip_prefix(root).unwrap_or(p).to_path_buf();
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}
