//! Per-run manifest: enough to re-run a command and check that it produced
//! the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::Command;

pub const FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub maod: String,
    pub checkpoint_format: u16,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            maod: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: maod_core::checkpoint::VERSION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub versions: Versions,
    /// SHA-256 of every output file except timing reports, keyed by path
    /// relative to the output directory.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(FILE), text).with_context(|| format!("writing manifest in {}", dir.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Timing reports differ from run to run and are left out of digests.
pub fn is_timing(rel: &str) -> bool {
    Path::new(rel)
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with("timing"))
}

/// Digests of all reproducible files under `dir`.
pub fn digest_outputs(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let rel = path
                .strip_prefix(root)
                .expect("walk stays under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            if rel == FILE || is_timing(&rel) {
                continue;
            }
            let bytes = std::fs::read(&path)?;
            out.insert(rel, maod_core::checkpoint::hex(&Sha256::digest(&bytes)));
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out).with_context(|| format!("hashing outputs in {}", dir.display()))?;
    Ok(out)
}

/// Paths whose digest differs, or which exist on one side only.
pub fn differences(expected: &BTreeMap<String, String>, found: &BTreeMap<String, String>) -> Vec<String> {
    let mut keys: Vec<&String> = expected.keys().chain(found.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| expected.get(*k) != found.get(*k))
        .cloned()
        .collect()
}
