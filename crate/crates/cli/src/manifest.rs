//! Per-invocation experiment directories with an append-only JSONL manifest.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::Utc;
use serde::Serialize;
use serde_json::{json, Value};

use crate::schema::SCHEMA_VERSION;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedStatus {
    Ok,
    Invalid,
    Failed,
}

#[derive(Debug)]
pub struct ExperimentManifest {
    pub id: String,
    pub mode: String,
    pub config_hash: String,
    pub dir: PathBuf,
    pub artifacts: Vec<String>,
    seeds: Vec<(u64, SeedStatus)>,
    file: File,
}

impl ExperimentManifest {
    /// Create a fresh directory `{root}/{name}-{mode}-{timestamp}-{hash8}`.
    /// An existing directory is never reused; a counter is appended instead.
    pub fn create(root: &Path, name: &str, mode: &str, config_hash: &str, config: &Value) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let stamp = Utc::now().format("%Y%m%dT%H%M%S");
        let base = format!("{name}-{mode}-{stamp}-{}", &config_hash[..8.min(config_hash.len())]);
        let mut id = base.clone();
        let mut n = 1;
        let dir = loop {
            let dir = root.join(&id);
            match fs::create_dir(&dir) {
                Ok(()) => break dir,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    n += 1;
                    id = format!("{base}-{n}");
                }
                Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
            }
        };
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(dir.join(MANIFEST_FILE))
            .context("creating manifest")?;
        let mut m = Self {
            id,
            mode: mode.into(),
            config_hash: config_hash.into(),
            dir,
            artifacts: Vec::new(),
            seeds: Vec::new(),
            file,
        };
        m.append(json!({
            "event": "start",
            "experiment_id": m.id,
            "mode": m.mode,
            "config_hash": m.config_hash,
            "schema_version": SCHEMA_VERSION,
            "started_at": Utc::now().to_rfc3339(),
            "config": config,
        }))?;
        Ok(m)
    }

    pub fn append(&mut self, record: Value) -> Result<()> {
        writeln!(self.file, "{record}").context("writing manifest")?;
        Ok(())
    }

    /// Path for an artifact inside the experiment directory; records it.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.into());
        }
        self.dir.join(name)
    }

    pub fn seed_done(&mut self, seed: u64, status: SeedStatus, detail: Value) -> Result<()> {
        self.seeds.push((seed, status.clone()));
        self.append(json!({"event": "seed", "seed": seed, "status": status, "detail": detail}))
    }

    pub fn warn(&mut self, message: &str) -> Result<()> {
        log::warn!("{message}");
        self.append(json!({"event": "warning", "message": message}))
    }

    pub fn finish(mut self, status: &str, summary: Value) -> Result<PathBuf> {
        let seeds: Vec<Value> = self.seeds.iter().map(|(s, st)| json!({"seed": s, "status": st})).collect();
        self.append(json!({
            "event": "end",
            "status": status,
            "ended_at": Utc::now().to_rfc3339(),
            "seeds": seeds,
            "artifacts": self.artifacts,
            "summary": summary,
        }))?;
        Ok(self.dir)
    }
}

/// Parse every record of a manifest file.
pub fn read_manifest(dir: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).with_context(|| format!("reading manifest in {}", dir.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).context("corrupt manifest line"))
        .collect()
}
