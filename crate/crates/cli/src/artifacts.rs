//! Output files, the manifest and hash verification.

use crate::config::RunConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST: &str = "manifest.json";

/// A JSON artifact: the payload plus the config that produced it.
#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub config: RunConfig,
    pub data: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub config_sha256: String,
    pub version: String,
    pub seed: u64,
    pub stages: Vec<StageTiming>,
    pub files: BTreeMap<String, FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(config: &RunConfig) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

impl Manifest {
    pub fn new(config: &RunConfig) -> Manifest {
        Manifest {
            config: config.clone(),
            config_sha256: config_hash(config),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            stages: Vec::new(),
            files: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Option<Manifest> {
        let text = std::fs::read_to_string(dir.join(MANIFEST)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Files whose content no longer matches the recorded hash.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|(name, e)| std::fs::read(dir.join(name)).map(|b| sha256_hex(&b) != e.sha256).unwrap_or(true))
            .map(|(name, _)| name.clone())
            .collect()
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(dir.join(MANIFEST), text)
    }
}

/// Writes files for one stage and records them in the manifest.
pub struct Writer<'a> {
    pub dir: &'a Path,
    pub config: &'a RunConfig,
    pub manifest: &'a mut Manifest,
    pub stage: String,
}

impl Writer<'_> {
    fn record(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.manifest.files.insert(
            name.to_string(),
            FileEntry { sha256: sha256_hex(bytes), bytes: bytes.len() as u64, stage: self.stage.clone() },
        );
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, data: &T) -> std::io::Result<()> {
        let wrapped = Artifact { config: self.config.clone(), data };
        let mut text = serde_json::to_string_pretty(&wrapped).map_err(std::io::Error::other)?;
        text.push('\n');
        self.record(name, text.as_bytes())
    }

    pub fn csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(std::io::Error::other)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        self.record(name, &bytes)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Artifact<T>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}
