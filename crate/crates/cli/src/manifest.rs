use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    /// Checksum with wall-clock columns removed, for outputs that record
    /// timings. Replays compare this instead of `sha256`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_free_sha256: Option<String>,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Artifact {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            timing_free_sha256: None,
        })
    }

    /// Like [`Artifact::of`] for a CSV whose last column is elapsed seconds.
    pub fn of_timed_csv(path: &Path) -> Result<Self> {
        let mut artifact = Self::of(path)?;
        let text = fs::read_to_string(path)?;
        let mut hasher = Sha256::new();
        for line in text.lines() {
            let kept = line.rsplit_once(',').map_or(line, |(head, _)| head);
            hasher.update(kept.as_bytes());
            hasher.update(b"\n");
        }
        artifact.timing_free_sha256 = Some(hex::encode(hasher.finalize()));
        Ok(artifact)
    }

    /// True when `other` holds the same content, ignoring timings.
    pub fn reproduces(&self, other: &Artifact) -> bool {
        match (&self.timing_free_sha256, &other.timing_free_sha256) {
            (Some(a), Some(b)) => a == b,
            _ => self.sha256 == other.sha256,
        }
    }
}

/// Record of one command invocation. `config` holds every resolved flag, so
/// `semrank replay` can rerun the command from this file alone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(FILE_NAME);
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
