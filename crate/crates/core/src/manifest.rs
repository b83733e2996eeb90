//! Run manifests: everything needed to re-execute a run and check that
//! it reproduced.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::io::{sha256_hex, write_atomic};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment switch recorded in manifests. All kernels here are
/// deterministic already, so the flag only documents the request.
pub const DETERMINISTIC_ENV: &str = "FEATINV_DETERMINISTIC";

pub fn deterministic_requested() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Finished with at least one attack aborted on a degenerate latent.
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub command: String,
    pub run_id: String,
    pub config_hash: String,
    /// Fully resolved config, defaults included.
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub deterministic: bool,
    pub timing_seconds: BTreeMap<String, f64>,
    pub status: RunStatus,
    pub artifacts: Vec<Artifact>,
    /// Engine-specific records (per-attack manifests, training manifest).
    pub details: serde_json::Value,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn artifact(&self, path: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == path)
    }

    /// Artifacts whose checksums differ from `other`'s, or that only one
    /// manifest lists.
    pub fn checksum_differences(&self, other: &RunManifest) -> Vec<String> {
        let mine: BTreeMap<&str, &str> = self.artifacts.iter().map(|a| (a.path.as_str(), a.sha256.as_str())).collect();
        let theirs: BTreeMap<&str, &str> = other.artifacts.iter().map(|a| (a.path.as_str(), a.sha256.as_str())).collect();
        let mut diff: Vec<String> = mine
            .iter()
            .filter(|(p, h)| theirs.get(*p) != Some(*h))
            .map(|(p, _)| p.to_string())
            .collect();
        diff.extend(theirs.keys().filter(|p| !mine.contains_key(*p)).map(|p| p.to_string()));
        diff
    }
}

/// Checksum every regular file under `dir` (recursively), sorted by path.
pub fn scan_artifacts(dir: &Path) -> Result<Vec<Artifact>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<Artifact>) -> Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .at(dir)?
            .collect::<std::io::Result<Vec<_>>>()
            .at(dir)?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let bytes = std::fs::read(&p).at(&p)?;
                let rel = p.strip_prefix(root).expect("under root");
                out.push(Artifact {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                });
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}
