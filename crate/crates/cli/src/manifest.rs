//! Per-directory record of configuration, inputs and written artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cfsim::evalviz::artifacts::MANIFEST_FILE;
use cfsim::io::{read_json, sha256_file, write_json};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub dataset: u64,
    pub classifier: u64,
    pub simulator: u64,
}

/// An input that lives outside the directory, pinned by hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub command: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub written: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub inputs: BTreeMap<String, InputRef>,
    /// Relative path to SHA-256 of every file in the directory.
    pub artifacts: BTreeMap<String, String>,
    pub commands: Vec<CommandRecord>,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            config: config.clone(),
            seeds: Seeds {
                dataset: config.dataset.seed,
                classifier: config.classifier.seed,
                simulator: config.simulator.seed,
            },
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            commands: Vec::new(),
        }
    }

    /// Loads `dir/manifest.json` if present, after checking every recorded
    /// artifact against its hash.
    pub fn load_verified(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        let m: RunManifest = read_json(&path)?;
        m.verify(dir)?;
        Ok(Some(m))
    }

    pub fn verify(&self, dir: &Path) -> Result<()> {
        let missing: Vec<String> = self
            .artifacts
            .keys()
            .filter(|rel| !dir.join(rel).is_file())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(CliError::MissingArtifacts(missing));
        }
        for (rel, expected) in &self.artifacts {
            let found = sha256_file(&dir.join(rel))?;
            if &found != expected {
                return Err(CliError::HashMismatch {
                    path: dir.join(rel),
                    expected: expected.clone(),
                    found,
                });
            }
        }
        Ok(())
    }

    /// Records an external input, refusing one whose hash changed since it
    /// was first recorded.
    pub fn pin_input(&mut self, name: &str, path: &Path, sha256: &str) -> Result<()> {
        if let Some(old) = self.inputs.get(name) {
            if old.path == path && old.sha256 != sha256 {
                return Err(CliError::HashMismatch {
                    path: path.to_path_buf(),
                    expected: old.sha256.clone(),
                    found: sha256.to_string(),
                });
            }
        }
        self.inputs.insert(
            name.to_string(),
            InputRef {
                path: path.to_path_buf(),
                sha256: sha256.to_string(),
            },
        );
        Ok(())
    }

    /// Re-indexes the directory, appends the command record and writes the
    /// manifest. Returns the files whose content changed.
    pub fn finish(&mut self, dir: &Path, command: &str, started: u128) -> Result<Vec<String>> {
        let mut fresh = BTreeMap::new();
        for rel in list_files(dir)? {
            if rel == MANIFEST_FILE {
                continue;
            }
            let hash = sha256_file(&dir.join(&rel))?;
            fresh.insert(rel, hash);
        }
        let written: Vec<String> = fresh
            .iter()
            .filter(|(k, v)| self.artifacts.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect();
        self.artifacts = fresh;
        self.commands.push(CommandRecord {
            command: command.to_string(),
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
            written: written.clone(),
        });
        write_json(&dir.join(MANIFEST_FILE), self)?;
        Ok(written)
    }
}

/// Every regular file below `dir`, as sorted `/`-separated relative paths.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|source| cfsim::Error::Io { path: d.clone(), source })?;
        for e in entries {
            let e = e.map_err(|source| cfsim::Error::Io { path: d.clone(), source })?;
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.is_file() {
                let rel = p.strip_prefix(dir).expect("below root");
                let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                out.push(parts.join("/"));
            }
        }
    }
    out.sort();
    Ok(out)
}
