//! Run-directory manifest: stage completion flags, artifact checksums, and
//! token accounting. A stage is marked complete only after its artifact file
//! has been fully written; reruns trust completion only while the config
//! hash matches.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use induct_core::gateway::GatewayStats;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = "manifest.lock";

/// Artifact files a run can produce; used when archiving before a forced
/// restart.
pub const KNOWN_ARTIFACTS: &[&str] = &[
    "segments.jsonl",
    "annotations.jsonl",
    "annotations.jsonl.ckpt",
    "hierarchy.json",
    "themes.jsonl",
    "incremental_run.json",
    "incremental_themes.jsonl",
    "assignments.jsonl",
    "assignments.jsonl.ckpt",
    "metrics.json",
    "heatmap.csv",
    "report.json",
];

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub complete: bool,
    pub finished_unix: u64,
    pub artifacts: BTreeMap<String, String>,
    pub upstream_calls: u64,
    pub cache_hits: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub created_unix: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn new(config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            created_unix: now_unix(),
            stages: BTreeMap::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.get(name)
    }

    pub fn stage_complete(&self, name: &str) -> bool {
        self.stages.get(name).map(|s| s.complete).unwrap_or(false)
    }
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Handle to a run directory. All artifact paths flow through here.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)
            .with_context(|| format!("cannot create run dir {}", root.display()))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Take the per-run-directory lock. Stale locks are reported, not stolen.
    pub fn lock(&self) -> Result<LockGuard> {
        let path = self.path(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                use std::io::Write;
                let _ = writeln!(file, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "run directory is locked ({} exists); if no other induct command is \
                     running, remove the file and retry",
                    path.display()
                )
            }
            Err(e) => Err(e).with_context(|| format!("cannot create lock {}", path.display())),
        }
    }

    pub fn load_manifest(&self) -> Result<Option<Manifest>> {
        let path = self.path(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path)
            .with_context(|| format!("cannot read manifest {}", path.display()))?;
        let manifest = serde_json::from_slice(&bytes)
            .with_context(|| format!("manifest {} is corrupt", path.display()))?;
        Ok(Some(manifest))
    }

    pub fn save_manifest(&self, manifest: &Manifest) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(manifest).context("serialize manifest")?;
        induct_core::jsonl::atomic_write(&self.path(MANIFEST_FILE), &bytes)
            .context("write manifest")?;
        Ok(())
    }

    /// Move every known artifact into `archive/<timestamp>/` ahead of a
    /// forced restart with a changed config.
    pub fn archive_artifacts(&self) -> Result<Option<PathBuf>> {
        let present: Vec<&str> =
            KNOWN_ARTIFACTS.iter().copied().filter(|name| self.path(name).exists()).collect();
        if present.is_empty() {
            return Ok(None);
        }
        let stamp = now_unix();
        let mut dir = self.root.join("archive").join(stamp.to_string());
        let mut suffix = 0;
        while dir.exists() {
            suffix += 1;
            dir = self.root.join("archive").join(format!("{stamp}-{suffix}"));
        }
        fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create archive dir {}", dir.display()))?;
        for name in present {
            fs::rename(self.path(name), dir.join(name))
                .with_context(|| format!("cannot archive {name}"))?;
        }
        Ok(Some(dir))
    }

    /// SHA-256 of an artifact file, for the manifest record.
    pub fn checksum(&self, name: &str) -> Result<String> {
        let bytes = fs::read(self.path(name))
            .with_context(|| format!("cannot read artifact {name}"))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Fold gateway counters into a stage record (cumulative across resumed
/// attempts of the same stage).
pub fn accumulate_stats(record: &mut StageRecord, stats: &GatewayStats) {
    record.upstream_calls += stats.upstream_calls;
    record.cache_hits += stats.cache_hits;
    record.prompt_tokens += stats.prompt_tokens;
    record.completion_tokens += stats.completion_tokens;
}
