use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fsutil;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: Option<String>,
}

/// Record of one command invocation, written next to its primary output
/// as `<out>.manifest.json` before any result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_sha256: Option<String>,
    pub resolved_config_sha256: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub tool_version: String,
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            config_path: None,
            config_sha256: None,
            resolved_config_sha256: None,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: now_unix(),
            finished_unix: None,
            tool_version: TOOL_VERSION.into(),
        }
    }

    pub fn with_config<T>(mut self, loaded: &crate::config::Loaded<T>) -> Self {
        self.config_path = Some(loaded.path.clone());
        self.config_sha256 = Some(loaded.file_sha256.clone());
        self.resolved_config_sha256 = Some(loaded.resolved_sha256.clone());
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Artifact {
            path: path.to_path_buf(),
            sha256: Some(fsutil::sha256_file(path)?),
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self).expect("manifest serialises");
        fsutil::write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_slice(&fsutil::read(path)?).map_err(|e| LabError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// True iff the config file still hashes to the recorded value.
    pub fn config_matches(&self) -> Result<bool> {
        match (&self.config_path, &self.config_sha256) {
            (Some(p), Some(h)) => Ok(&fsutil::sha256_file(p)? == h),
            _ => Ok(false),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_config_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "seed = 1\n").unwrap();
        let mut m = RunManifest::new("gen");
        m.config_path = Some(cfg.clone());
        m.config_sha256 = Some(fsutil::sha256_file(&cfg).unwrap());
        m.seeds.insert("seed".into(), 1);
        let p = manifest_path(&dir.path().join("out.jsonl"));
        assert!(p.to_string_lossy().ends_with("out.jsonl.manifest.json"));
        m.write(&p).unwrap();
        let back = RunManifest::read(&p).unwrap();
        assert_eq!(back, m);
        assert!(back.config_matches().unwrap());
        std::fs::write(&cfg, "seed = 2\n").unwrap();
        assert!(!back.config_matches().unwrap());
    }
}
