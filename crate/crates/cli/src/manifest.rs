//! Run manifests: config snapshot, output checksums, key statistics and
//! threshold checks, written as JSON next to the outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::io::{fmt_g17, sha256_file};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// A named pass/fail judgment against a configured threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub experiment: String,
    pub config: BTreeMap<String, String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub outputs: Vec<OutputEntry>,
    pub divergence_count: u64,
    /// key statistics; values are 17-digit strings so the manifest is
    /// byte-stable and lossless
    pub stats: BTreeMap<String, String>,
    pub checks: Vec<Check>,
}

pub fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(experiment: &str, config: BTreeMap<String, String>) -> Self {
        RunManifest {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            experiment: experiment.to_string(),
            config,
            started_unix_ms: now_unix_ms(),
            finished_unix_ms: 0,
            outputs: Vec::new(),
            divergence_count: 0,
            stats: BTreeMap::new(),
            checks: Vec::new(),
        }
    }

    pub fn record_stat(&mut self, name: &str, value: f64) {
        self.stats.insert(name.to_string(), fmt_g17(value));
    }

    pub fn stat(&self, name: &str) -> Option<f64> {
        self.stats.get(name).and_then(|s| s.parse().ok())
    }

    pub fn record_check(&mut self, name: &str, pass: bool, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            pass,
            detail,
        });
    }

    /// Hashes and registers an emitted file.
    pub fn register_output(&mut self, dir: &Path, file_name: &str) -> io::Result<()> {
        let path = dir.join(file_name);
        let sha256 = sha256_file(&path)?;
        let bytes = fs::metadata(&path)?.len();
        self.outputs.push(OutputEntry {
            path: file_name.to_string(),
            sha256,
            bytes,
        });
        Ok(())
    }

    /// Serializes to pretty JSON and writes `manifest.json` in `dir`.
    pub fn write(&mut self, dir: &Path) -> io::Result<PathBuf> {
        self.finished_unix_ms = now_unix_ms();
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(&path, json)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(io::Error::other)
    }
}

/// One file's verification outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifyStatus {
    Ok,
    Missing,
    Mismatch { expected: String, actual: String },
}

/// Recomputes the checksum of every registered output, resolving paths
/// relative to the manifest location.
pub fn verify_manifest(manifest_path: &Path) -> io::Result<Vec<(String, VerifyStatus)>> {
    let manifest = RunManifest::read(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut results = Vec::with_capacity(manifest.outputs.len());
    for entry in &manifest.outputs {
        let path = dir.join(&entry.path);
        let status = if !path.exists() {
            VerifyStatus::Missing
        } else {
            let actual = sha256_file(&path)?;
            if actual == entry.sha256 {
                VerifyStatus::Ok
            } else {
                VerifyStatus::Mismatch {
                    expected: entry.sha256.clone(),
                    actual,
                }
            }
        };
        results.push((entry.path.clone(), status));
    }
    Ok(results)
}
