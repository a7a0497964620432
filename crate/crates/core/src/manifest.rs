//! Run manifests: the resolved configuration, seed, timings, NFE counters
//! and content hashes of everything a subcommand wrote.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};

pub const FORMAT: &str = "selfnpo-run/1";

/// Network evaluations spent by a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NfeCounters {
    /// Reference-model evaluations used to generate training data.
    pub generation: u64,
    /// Student forward passes during training.
    pub training: u64,
    /// Evaluations spent drawing output samples.
    pub sampling: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub started: String,
    pub finished: String,
    /// Artifact role to path.
    pub artifacts: BTreeMap<String, String>,
    /// Artifact path to SHA-256 of its bytes.
    pub hashes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nfe: Option<NfeCounters>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: BTreeMap<String, String>) -> Self {
        Self {
            format: FORMAT.to_string(),
            command: command.to_string(),
            seed,
            config,
            started: now(),
            finished: String::new(),
            artifacts: BTreeMap::new(),
            hashes: BTreeMap::new(),
            nfe: None,
            metrics: BTreeMap::new(),
        }
    }

    /// Records an artifact and hashes its current bytes.
    pub fn add_artifact(&mut self, role: &str, path: &Path) -> Result<()> {
        let key = path.display().to_string();
        self.hashes
            .insert(key.clone(), sha256_hex(&fs::read(path)?));
        self.artifacts.insert(role.to_string(), key);
        Ok(())
    }

    /// Short method label for reports, e.g. `self-npo k=5`.
    pub fn label(&self) -> String {
        let mode_k = match self.config.get("mode").map(String::as_str) {
            Some("full-simulation") => self.config.get("full_k"),
            _ => self.config.get("k"),
        };
        match mode_k {
            Some(k) => format!("{} k={k}", self.command),
            None => self.command.clone(),
        }
    }

    /// Stamps the finish time and writes the manifest via a temporary file
    /// and a rename, so readers never see a partial file.
    pub fn write_atomic(&mut self, path: &Path) -> Result<()> {
        self.finished = now();
        let json = serde_json::to_vec_pretty(self)?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&json)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: RunManifest = serde_json::from_slice(&fs::read(path)?)?;
        if m.format != FORMAT {
            return Err(Error::IncompleteManifest(format!(
                "{}: unsupported format `{}`",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }

    /// Artifact hashes that no longer match the files on disk.
    pub fn stale_hashes(&self) -> Result<Vec<String>> {
        let mut stale = Vec::new();
        for (path, hash) in &self.hashes {
            if sha256_hex(&fs::read(path)?) != *hash {
                stale.push(path.clone());
            }
        }
        Ok(stale)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
