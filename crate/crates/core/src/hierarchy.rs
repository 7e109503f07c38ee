//! Hierarchical clustering of the label pool: batch the labels, prompt the
//! model to synthesize themes per batch, validate the JSON response, and
//! iterate over the resulting theme phrases until convergence. Full
//! parent/child lineage is retained at every level so any final theme can be
//! walked back to its fine-grained labels and segments.

use std::collections::{BTreeMap, BTreeSet};

use futures::StreamExt;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatOptions, ChatRequest, Gateway, GatewayError};
use crate::json_relaxed;
use crate::labeling::{normalize_phrase, PoolEntry};

const CLUSTER_TEMPLATE: &str = "Synthesize the entire list of labels by clustering similar labels that are inductively labeled. The clustering is to finalize MEANINGFUL and INSIGHTFUL THEMES for {Goal of inductive coding}. Output in json format where the key is the cluster, and the value is the list of input labels in that cluster. For each cluster, the value should only take labels from the user input. ONLY output the JSON object, and do not add any other text.";

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("label pool is empty")]
    EmptyPool,
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
    #[error("unknown theme id `{0}`")]
    UnknownTheme(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Error)]
pub enum ClusterParseError {
    #[error("no JSON object in response: {0}")]
    NoObject(String),
    #[error("response JSON object is empty")]
    Empty,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_theme_threshold")]
    pub theme_threshold: usize,
    #[serde(default)]
    pub shuffle_seed: u64,
}

fn default_batch_size() -> usize {
    100
}
fn default_max_iterations() -> usize {
    5
}
fn default_theme_threshold() -> usize {
    20
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            max_iterations: default_max_iterations(),
            theme_threshold: default_theme_threshold(),
            shuffle_seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), HierarchyError> {
        if self.batch_size < 1 {
            return Err(HierarchyError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.max_iterations < 1 {
            return Err(HierarchyError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if self.theme_threshold < 1 {
            return Err(HierarchyError::InvalidConfig("theme_threshold must be >= 1".into()));
        }
        Ok(())
    }
}

/// A child reference: level-1 themes point at pool labels, level-n themes
/// (n > 1) point at level-(n-1) theme ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum ChildRef {
    Label(String),
    Theme(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Theme {
    pub theme_id: String,
    pub phrase: String,
    /// Iteration index this theme was produced at, starting from 1.
    pub level: usize,
    pub children: Vec<ChildRef>,
    /// Count of distinct segments reachable through descendant labels.
    pub segment_support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Threshold,
    FixedPoint,
}

/// Full record of a clustering run: the input pool, every iteration's
/// themes, and the final theme list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierarchyRun {
    pub pool: Vec<PoolEntry>,
    pub iterations: Vec<Vec<Theme>>,
    pub final_themes: Vec<Theme>,
    pub stop_reason: StopReason,
}

/// Seeded shuffle followed by chunking; the union of batches is exactly the
/// input multiset.
pub fn partition_batches(items: &[String], batch_size: usize, seed: u64) -> Vec<Vec<String>> {
    let mut shuffled: Vec<String> = items.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    shuffled.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// System prompt is the clustering template with the goal substituted; user
/// prompt lists the batch items one per line.
pub fn build_cluster_prompt(goal: &str, batch: &[String], opts: &ChatOptions) -> ChatRequest {
    let system = CLUSTER_TEMPLATE.replace("{Goal of inductive coding}", goal);
    ChatRequest::new(opts, system, batch.join("\n"))
}

/// A validated per-batch clustering: theme phrase → members, where members
/// are canonical batch items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterParse {
    pub clusters: Vec<(String, Vec<String>)>,
    pub anomalies: Vec<String>,
    /// Batch items absent from every cluster, re-added as singletons.
    pub backfilled: Vec<String>,
}

/// Parse and validate one clustering response against its batch.
///
/// The outermost balanced JSON object is extracted (prose and code fences
/// tolerated). Members are matched to batch items by normalized string
/// equality; foreign members are dropped with an anomaly, duplicate claims
/// keep the first cluster, and batch items missing from every cluster are
/// appended as singleton clusters named by the item itself, so the result is
/// always a partition of the batch.
pub fn parse_cluster_response(
    raw: &str,
    batch: &[String],
) -> Result<ClusterParse, ClusterParseError> {
    let value = json_relaxed::parse_object_relaxed(raw).map_err(ClusterParseError::NoObject)?;
    let object = value.as_object().expect("parse_object_relaxed returns objects");
    if object.is_empty() {
        return Err(ClusterParseError::Empty);
    }

    let mut by_norm: BTreeMap<String, &String> = BTreeMap::new();
    for item in batch {
        by_norm.entry(normalize_phrase(item)).or_insert(item);
    }

    let mut claimed: BTreeSet<String> = BTreeSet::new();
    let mut clusters: Vec<(String, Vec<String>)> = Vec::new();
    let mut anomalies: Vec<String> = Vec::new();

    for (phrase, members_value) in object {
        let Some(members) = members_value.as_array() else {
            anomalies.push(format!("cluster `{phrase}` value is not an array; dropped"));
            continue;
        };
        if phrase.trim().is_empty() {
            anomalies.push("cluster with empty phrase dropped".to_string());
            continue;
        }
        let mut kept: Vec<String> = Vec::new();
        for member in members {
            let Some(text) = member.as_str() else {
                anomalies.push(format!("non-string member in `{phrase}` dropped"));
                continue;
            };
            let norm = normalize_phrase(text);
            match by_norm.get(&norm) {
                Some(&original) => {
                    if claimed.insert(norm) {
                        kept.push(original.clone());
                    } else {
                        anomalies.push(format!(
                            "member `{text}` claimed by multiple clusters; kept first"
                        ));
                    }
                }
                None => {
                    anomalies.push(format!(
                        "foreign member `{text}` not in batch; dropped from `{phrase}`"
                    ));
                }
            }
        }
        if kept.is_empty() {
            anomalies.push(format!("cluster `{phrase}` had no surviving members; dropped"));
        } else {
            clusters.push((phrase.clone(), kept));
        }
    }

    let mut backfilled = Vec::new();
    for item in batch {
        if !claimed.contains(&normalize_phrase(item)) {
            clusters.push((item.clone(), vec![item.clone()]));
            backfilled.push(item.clone());
        }
    }

    Ok(ClusterParse { clusters, anomalies, backfilled })
}

fn singleton_fallback(batch: &[String]) -> Vec<(String, Vec<String>)> {
    batch.iter().map(|item| (item.clone(), vec![item.clone()])).collect()
}

/// Run the full iterative clustering over a non-empty label pool.
///
/// Iteration 1 clusters pool labels; iteration n clusters the distinct theme
/// phrases of iteration n-1. Batches within one iteration run concurrently;
/// iterations are sequential. The run stops at a fixed point (no reduction
/// in theme count), at the theme threshold, or at the iteration cap —
/// checked in that order. A batch whose responses stay unparseable passes
/// through as singletons; the run never aborts on model noise.
pub async fn run_hierarchical_clustering(
    pool: &[PoolEntry],
    goal: &str,
    cfg: &ClusterConfig,
    gateway: &Gateway,
    chat: &ChatOptions,
) -> Result<HierarchyRun, HierarchyError> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(HierarchyError::EmptyPool);
    }

    let label_segments: BTreeMap<&str, BTreeSet<&str>> = pool
        .iter()
        .map(|e| (e.label.as_str(), e.segment_ids.iter().map(String::as_str).collect()))
        .collect();

    // Items fed into the current iteration. For level 1 these are pool
    // labels; afterwards, representative phrases of the previous level's
    // themes, deduplicated by normalized form.
    let mut items: Vec<String> = pool.iter().map(|e| e.label.clone()).collect();
    // normalized item -> lineage children it stands for.
    let mut item_children: BTreeMap<String, Vec<ChildRef>> = items
        .iter()
        .map(|label| (normalize_phrase(label), vec![ChildRef::Label(label.clone())]))
        .collect();

    let mut support: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut iterations: Vec<Vec<Theme>> = Vec::new();
    let mut prev_count = items.len();

    let stop_reason = loop {
        let level = iterations.len() + 1;
        let batches =
            partition_batches(&items, cfg.batch_size, cfg.shuffle_seed.wrapping_add(level as u64));

        let mut batch_results: Vec<Vec<(String, Vec<String>)>> = Vec::with_capacity(batches.len());
        {
            let mut stream = futures::stream::iter(
                batches.iter().map(|batch| cluster_one_batch(batch, goal, gateway, chat)),
            )
            .buffered(gateway.max_concurrency());
            while let Some(result) = stream.next().await {
                batch_results.push(result?);
            }
        }

        let mut themes: Vec<Theme> = Vec::new();
        for clusters in batch_results {
            for (phrase, members) in clusters {
                let theme_id = format!("t{}-{}", level, themes.len());
                let mut children: Vec<ChildRef> = Vec::new();
                let mut segments: BTreeSet<String> = BTreeSet::new();
                for member in &members {
                    let norm = normalize_phrase(member);
                    let refs =
                        item_children.get(&norm).expect("members are validated batch items");
                    for child in refs {
                        match child {
                            ChildRef::Label(label) => {
                                if let Some(ids) = label_segments.get(label.as_str()) {
                                    segments.extend(ids.iter().map(|s| s.to_string()));
                                }
                            }
                            ChildRef::Theme(id) => {
                                if let Some(ids) = support.get(id) {
                                    segments.extend(ids.iter().cloned());
                                }
                            }
                        }
                        children.push(child.clone());
                    }
                }
                support.insert(theme_id.clone(), segments.clone());
                themes.push(Theme {
                    theme_id,
                    phrase,
                    level,
                    children,
                    segment_support: segments.len(),
                });
            }
        }

        let count = themes.len();
        debug_assert!(count <= prev_count, "theme count may never grow");
        iterations.push(themes);

        if count == prev_count {
            break StopReason::FixedPoint;
        }
        if count <= cfg.theme_threshold {
            break StopReason::Threshold;
        }
        if level >= cfg.max_iterations {
            break StopReason::MaxIterations;
        }

        prev_count = count;
        items = Vec::new();
        item_children = BTreeMap::new();
        for theme in iterations.last().expect("just pushed") {
            let norm = normalize_phrase(&theme.phrase);
            match item_children.entry(norm) {
                std::collections::btree_map::Entry::Vacant(slot) => {
                    slot.insert(vec![ChildRef::Theme(theme.theme_id.clone())]);
                    items.push(theme.phrase.clone());
                }
                std::collections::btree_map::Entry::Occupied(mut slot) => {
                    // Same phrase from two batches: the next level claims both.
                    slot.get_mut().push(ChildRef::Theme(theme.theme_id.clone()));
                }
            }
        }
    };

    let final_themes = iterations.last().cloned().unwrap_or_default();
    Ok(HierarchyRun { pool: pool.to_vec(), iterations, final_themes, stop_reason })
}

async fn cluster_one_batch(
    batch: &[String],
    goal: &str,
    gateway: &Gateway,
    chat: &ChatOptions,
) -> Result<Vec<(String, Vec<String>)>, HierarchyError> {
    let request = build_cluster_prompt(goal, batch, chat);
    let first = match gateway.complete(&request).await {
        Ok(resp) => {
            if resp.finish_reason == crate::gateway::FinishReason::Length {
                tracing::warn!("cluster response hit the token limit; JSON may be truncated");
            }
            resp.text
        }
        Err(e) if e.is_fatal() => return Err(e.into()),
        Err(e) => {
            tracing::warn!(error = %e, "gateway failure on batch; passing through as singletons");
            return Ok(singleton_fallback(batch));
        }
    };
    match parse_cluster_response(&first, batch) {
        Ok(parse) => {
            log_anomalies(&parse);
            return Ok(parse.clusters);
        }
        Err(e) => {
            tracing::warn!(error = %e, "cluster response unparseable; retrying once");
        }
    }
    let second = match gateway.complete_opts(&request, true).await {
        Ok(resp) => resp.text,
        Err(e) if e.is_fatal() => return Err(e.into()),
        Err(e) => {
            tracing::warn!(error = %e, "gateway failure on retry; passing through as singletons");
            return Ok(singleton_fallback(batch));
        }
    };
    match parse_cluster_response(&second, batch) {
        Ok(parse) => {
            log_anomalies(&parse);
            Ok(parse.clusters)
        }
        Err(e) => {
            tracing::warn!(error = %e, "cluster response unparseable after retry; singletons");
            Ok(singleton_fallback(batch))
        }
    }
}

fn log_anomalies(parse: &ClusterParse) {
    for anomaly in &parse.anomalies {
        tracing::warn!(%anomaly, "cluster parse anomaly");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceDepth {
    Levels(usize),
    Full,
}

/// Node of a lineage subtree. Theme nodes expand into children until the
/// depth budget runs out; label leaves carry their segment references.
#[derive(Debug, Clone, Serialize)]
pub struct TraceNode {
    pub kind: &'static str,
    pub id: String,
    pub phrase: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    pub segment_support: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub segment_ids: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TraceNode>,
}

/// Walk a theme back through the lineage, truncating at `depth` levels below
/// it (`Full` reaches the pool labels).
pub fn trace_theme(
    run: &HierarchyRun,
    theme_id: &str,
    depth: TraceDepth,
) -> Result<TraceNode, HierarchyError> {
    let index: BTreeMap<&str, &Theme> =
        run.iterations.iter().flatten().map(|t| (t.theme_id.as_str(), t)).collect();
    let theme =
        index.get(theme_id).ok_or_else(|| HierarchyError::UnknownTheme(theme_id.to_string()))?;
    let pool: BTreeMap<&str, &PoolEntry> =
        run.pool.iter().map(|e| (e.label.as_str(), e)).collect();
    let budget = match depth {
        TraceDepth::Levels(n) => n,
        TraceDepth::Full => usize::MAX,
    };
    Ok(trace_node(theme, &index, &pool, budget))
}

fn trace_node(
    theme: &Theme,
    index: &BTreeMap<&str, &Theme>,
    pool: &BTreeMap<&str, &PoolEntry>,
    budget: usize,
) -> TraceNode {
    let children = if budget == 0 {
        Vec::new()
    } else {
        theme
            .children
            .iter()
            .map(|child| match child {
                ChildRef::Label(label) => {
                    let segment_ids = pool
                        .get(label.as_str())
                        .map(|e| e.segment_ids.clone())
                        .unwrap_or_default();
                    TraceNode {
                        kind: "label",
                        id: label.clone(),
                        phrase: label.clone(),
                        level: None,
                        segment_support: segment_ids.iter().collect::<BTreeSet<_>>().len(),
                        segment_ids,
                        children: Vec::new(),
                    }
                }
                ChildRef::Theme(id) => {
                    let child_theme = index.get(id.as_str()).expect("lineage ids are internal");
                    trace_node(child_theme, index, pool, budget - 1)
                }
            })
            .collect()
    };
    TraceNode {
        kind: "theme",
        id: theme.theme_id.clone(),
        phrase: theme.phrase.clone(),
        level: Some(theme.level),
        segment_support: theme.segment_support,
        segment_ids: Vec::new(),
        children,
    }
}

/// Collect the pool labels reachable from a theme (the leaves of its full
/// trace).
pub fn theme_leaf_labels(
    run: &HierarchyRun,
    theme_id: &str,
) -> Result<Vec<String>, HierarchyError> {
    let node = trace_theme(run, theme_id, TraceDepth::Full)?;
    let mut labels = Vec::new();
    collect_leaves(&node, &mut labels);
    Ok(labels)
}

fn collect_leaves(node: &TraceNode, out: &mut Vec<String>) {
    if node.kind == "label" {
        out.push(node.id.clone());
    }
    for child in &node.children {
        collect_leaves(child, out);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub theme_id: String,
    pub phrase: String,
    /// Number of pool-label leaves under the theme.
    pub label_count: usize,
    pub segment_support: usize,
}

/// Final themes ranked by how many pool labels they absorbed; ties broken by
/// phrase. Counts over all rows sum to the pool size.
pub fn theme_distribution(run: &HierarchyRun) -> Vec<DistributionRow> {
    let mut rows: Vec<DistributionRow> = run
        .final_themes
        .iter()
        .map(|t| {
            let labels = theme_leaf_labels(run, &t.theme_id).expect("final themes exist");
            DistributionRow {
                theme_id: t.theme_id.clone(),
                phrase: t.phrase.clone(),
                label_count: labels.len(),
                segment_support: t.segment_support,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.label_count.cmp(&a.label_count).then_with(|| a.phrase.cmp(&b.phrase)));
    rows
}
