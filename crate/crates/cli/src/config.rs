//! Run configuration: one JSON document parameterizing every stage.
//!
//! Generation, clustering, and embedding models are configured
//! independently (model id + gateway each). Relative paths resolve against
//! the config file's directory, except gateway cache dirs, which resolve
//! against the run directory. The top-level `seed` fills in
//! `cluster.shuffle_seed` and `incremental.seed` when those are omitted.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use induct_core::corpus::{CorpusFormat, SegmentationPolicy};
use induct_core::gateway::{ChatOptions, GatewayConfig};
use induct_core::hierarchy::ClusterConfig;
use induct_core::incremental::IncrementalConfig;
use induct_core::labeling::TaskSpec;
use serde::Deserialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Deserialize)]
pub struct CorpusSection {
    pub path: PathBuf,
    pub format: CorpusFormat,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ModelSection {
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    pub gateway: GatewayConfig,
}

fn default_max_output_tokens() -> u32 {
    1024
}

impl ModelSection {
    pub fn chat_options(&self) -> ChatOptions {
        ChatOptions {
            model_id: self.model_id.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct AssignmentSection {
    #[serde(default = "default_fuzzy_threshold")]
    pub fuzzy_threshold: f64,
}

fn default_fuzzy_threshold() -> f64 {
    0.8
}

impl Default for AssignmentSection {
    fn default() -> Self {
        Self { fuzzy_threshold: default_fuzzy_threshold() }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub segmentation: SegmentationPolicy,
    pub generation: ModelSection,
    pub clustering: ModelSection,
    pub embedding: ModelSection,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub incremental: IncrementalConfig,
    #[serde(default)]
    pub assignment: AssignmentSection,
    #[serde(default = "default_k_grid")]
    pub k_grid: Vec<f64>,
    /// Backfills `cluster.shuffle_seed` and `incremental.seed` when those
    /// are omitted; the backfill happens on the raw document before typed
    /// parsing.
    #[serde(default)]
    #[allow(dead_code)]
    pub seed: u64,
    #[serde(default)]
    pub run_dir: Option<PathBuf>,
}

fn default_k_grid() -> Vec<f64> {
    vec![0.4, 0.45, 0.5]
}

/// A parsed config plus its content hash and resolved paths.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// SHA-256 of the canonicalized config document; stage completion is
    /// only trusted while this hash matches the manifest.
    pub hash: String,
    pub run_dir: PathBuf,
}

pub fn load_config(path: &Path, run_dir_override: Option<&Path>) -> Result<LoadedConfig> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let mut value: serde_json::Value = serde_json::from_slice(&bytes)
        .with_context(|| format!("config {} is not valid JSON", path.display()))?;

    // serde_json::Value keeps object keys sorted, so this is canonical.
    let hash = hex::encode(Sha256::digest(value.to_string().as_bytes()));

    // Top-level seed backfills the stage seeds when absent.
    if let Some(root) = value.as_object_mut() {
        let seed = root.get("seed").cloned().unwrap_or(serde_json::json!(0));
        if let Some(cluster) = root.get_mut("cluster").and_then(|v| v.as_object_mut()) {
            cluster.entry("shuffle_seed").or_insert(seed.clone());
        }
        if let Some(inc) = root.get_mut("incremental").and_then(|v| v.as_object_mut()) {
            inc.entry("seed").or_insert(seed.clone());
        }
        if !root.contains_key("cluster") {
            root.insert("cluster".into(), serde_json::json!({ "shuffle_seed": seed }));
        }
        if !root.contains_key("incremental") {
            root.insert("incremental".into(), serde_json::json!({ "seed": seed }));
        }
    }

    let mut config: RunConfig =
        serde_json::from_value(value).with_context(|| format!("config {}", path.display()))?;
    validate(&config)?;

    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let run_dir = match run_dir_override {
        Some(dir) => dir.to_path_buf(),
        None => {
            let configured = config
                .run_dir
                .clone()
                .context("config has no run_dir and --run-dir was not given")?;
            resolve(&base, &configured)
        }
    };
    config.corpus.path = resolve(&base, &config.corpus.path);
    for section in [&mut config.generation, &mut config.clustering, &mut config.embedding] {
        if let Some(cache) = &section.gateway.cache_dir {
            section.gateway.cache_dir = Some(resolve(&run_dir, cache));
        }
    }

    Ok(LoadedConfig { config, hash, run_dir })
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn validate(config: &RunConfig) -> Result<()> {
    if config.task.background_info.trim().is_empty() || config.task.coding_goal.trim().is_empty()
    {
        bail!("task.background_info and task.coding_goal must be non-empty");
    }
    if config.k_grid.is_empty() {
        bail!("k_grid must hold at least one threshold");
    }
    for &k in &config.k_grid {
        if !(0.0 < k && k < 1.0) {
            bail!("k_grid values must lie in (0, 1); got {k}");
        }
    }
    let fuzzy = config.assignment.fuzzy_threshold;
    if !(0.0 < fuzzy && fuzzy <= 1.0) {
        bail!("assignment.fuzzy_threshold must lie in (0, 1]; got {fuzzy}");
    }
    for (name, section) in [
        ("generation", &config.generation),
        ("clustering", &config.clustering),
        ("embedding", &config.embedding),
    ] {
        if section.model_id.trim().is_empty() {
            bail!("{name}.model_id must be set explicitly");
        }
        section
            .gateway
            .validate()
            .map_err(|e| anyhow::anyhow!("{name}.gateway: {e}"))?;
    }
    config
        .segmentation
        .validate()
        .map_err(|e| anyhow::anyhow!("segmentation: {e}"))?;
    Ok(())
}
