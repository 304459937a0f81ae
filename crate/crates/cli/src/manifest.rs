//! Run manifest: per-stage output digests and timings, written atomically.
//!
//! Re-running a stage with an identical configuration reproduces identical
//! digest maps; wall-clock timings are the only fields expected to differ.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct StageRecord {
    /// Output path (relative to the run directory) -> SHA-256 hex digest.
    pub files: BTreeMap<String, String>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub tool_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config_sha256: String) -> RunManifest {
        RunManifest {
            config_sha256,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: BTreeMap::new(),
        }
    }

    /// Load the run's manifest, or start a fresh one. An existing manifest
    /// from a different configuration is discarded.
    pub fn load_or_new(run_dir: &Path, config_sha256: &str) -> RunManifest {
        let path = run_dir.join(MANIFEST_FILE);
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(m) = serde_json::from_str::<RunManifest>(&text) {
                if m.config_sha256 == config_sha256 {
                    return m;
                }
            }
        }
        RunManifest::new(config_sha256.to_string())
    }

    pub fn record_stage(&mut self, stage: &str, files: BTreeMap<String, String>, wall_ms: u64) {
        self.stages.insert(stage.to_string(), StageRecord { files, wall_ms });
    }

    /// Atomic write: serialize to a temp file in the same directory, then
    /// rename over the destination.
    pub fn save(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        atomic_write(&run_dir.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Digest maps only (the reproducible part), for equality checks.
    pub fn digests(&self) -> BTreeMap<String, BTreeMap<String, String>> {
        self.stages.iter().map(|(k, v)| (k.clone(), v.files.clone())).collect()
    }
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Digest of a text file excluding its first line, for files whose only
/// run-dependent content is a `#`-prefixed timestamp header.
pub fn sha256_file_below_header(path: &Path) -> Result<String> {
    let text = std::fs::read(path)?;
    let start = text.iter().position(|&b| b == b'\n').map_or(0, |i| i + 1);
    let digest = Sha256::digest(&text[start..]);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Digest every regular file under `dirs` (relative to `run_dir`), sorted by
/// relative path.
pub fn digest_outputs(run_dir: &Path, dirs: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    for d in dirs {
        let root = run_dir.join(d);
        if root.is_file() {
            files.push(root);
        } else if root.is_dir() {
            collect_files(&root, &mut files)?;
        }
    }
    files.sort();
    let mut out = BTreeMap::new();
    for f in files {
        let rel = f
            .strip_prefix(run_dir)
            .unwrap_or(&f)
            .to_string_lossy()
            .replace('\\', "/");
        // The report's timestamp lives on its first line only; hash the body
        // so identical runs produce identical digest maps.
        let digest = if rel == "report.txt" { sha256_file_below_header(&f)? } else { sha256_file(&f)? };
        out.insert(rel, digest);
    }
    Ok(out)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path.is_file() {
            out.push(path);
        }
    }
    Ok(())
}
