//! One JSON line per run, appended to `manifests.jsonl` under the run root.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_LOG: &str = "manifests.jsonl";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub status: String,
    /// SHA-256 of every output file (directories hash their sorted contents).
    pub artifacts: BTreeMap<String, String>,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    hash_into(path, path, &mut h)?;
    Ok(format!("{:x}", h.finalize()))
}

fn hash_into(root: &Path, path: &Path, h: &mut Sha256) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            let rel = e.strip_prefix(root).unwrap_or(&e).to_string_lossy().into_owned();
            h.update(rel.as_bytes());
            h.update([0]);
            hash_into(root, &e, h)?;
        }
    } else {
        h.update(std::fs::read(path)?);
    }
    Ok(())
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            args,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            started_unix: now_unix(),
            finished_unix: 0.0,
            status: String::new(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Hashes outputs that exist and appends the manifest line.
    pub fn finish(mut self, run_root: &Path, status: &str) -> Result<()> {
        self.finished_unix = now_unix();
        self.status = status.to_string();
        for out in &self.outputs {
            if out.exists() {
                self.artifacts.insert(out.display().to_string(), sha256_path(out)?);
            }
        }
        std::fs::create_dir_all(run_root)?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(run_root.join(MANIFEST_LOG))?;
        writeln!(f, "{}", serde_json::to_string(&self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_hash_tracks_contents() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a"), b"1").unwrap();
        let h1 = sha256_path(dir.path()).unwrap();
        assert_eq!(h1, sha256_path(dir.path()).unwrap());
        std::fs::write(dir.path().join("a"), b"2").unwrap();
        assert_ne!(h1, sha256_path(dir.path()).unwrap());
    }

    #[test]
    fn manifests_append() {
        let dir = tempfile::tempdir().unwrap();
        RunManifest::new("x", vec![]).finish(dir.path(), "ok").unwrap();
        RunManifest::new("y", vec![]).finish(dir.path(), "ok").unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_LOG)).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["command"], "x");
    }
}
