//! Incremental comparison pipeline, mimicking how human coders work:
//! generate labels for samples of unseen data, merge the evolving codebook
//! through an LLM prompt, and drop codes that stay attached to too few
//! segments. After the full phase, only merging and dropping run until every
//! code has support above the drop threshold.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Segment;
use crate::gateway::{ChatOptions, ChatRequest, Gateway, GatewayError};
use crate::json_relaxed;
use crate::labeling::{
    generate_labels, normalize_phrase, GenerateOptions, LabelingError, TaskSpec,
};

const MERGE_TEMPLATE: &str = r#"Synthesize the entire list of labels by clustering similar labels that are inductively labeled.
The clustering is to finalize MEANINGFUL and INSIGHTFUL THEMES for {Goal of Inductive Coding}
You will be provided with an existing codebook. Now you need to cluster the codes into clusters and provide one higher level code for each cluster of codes.

Guidelines for Clustering:
- Analyze existing codes and their corresponding segments and cluster the existing codes into clusters with corresponding higher level codes representing the whole cluster.

The existing codebook will be provided as input following this example below:
1. <code1>

-> <segment labeled with code1>

2. <code2>

-> <segment labeled with code2>

...

n. <codeN>

-> <segment labeled with codeN>

Provide your answers following this output format example below:
Ans:
{
"clusters": [
    {
    "high_level_code": "Cyber Harassment",
    "original_codes": ["Online Harassment", "Cyberbullying"],
    "justification": "Both refer to aggressive online behavior; Cyberbullying is a subset but can be generalized."
    }
]
}

When no clustering is needed, answer N/A and provide your answer following this output format below:
Ans: N/A"#;

#[derive(Debug, Error)]
pub enum IncrementalError {
    #[error("no unseen segments left to sample")]
    PoolExhausted,
    #[error("invalid incremental config: {0}")]
    InvalidConfig(String),
    #[error("no segments supplied")]
    NoSegments,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Labeling(#[from] LabelingError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncrementalConfig {
    #[serde(default = "default_first_sample")]
    pub first_sample: usize,
    #[serde(default = "default_later_sample")]
    pub later_sample: usize,
    #[serde(default = "default_full_phase_iterations")]
    pub full_phase_iterations: usize,
    #[serde(default = "default_drop_support")]
    pub drop_support: usize,
    #[serde(default = "default_drop_age")]
    pub drop_age: usize,
    #[serde(default = "default_min_segments_per_label")]
    pub min_segments_per_label: usize,
    /// Safety cap on tail-phase iterations; the merge/drop loop alone is not
    /// guaranteed to terminate if the model keeps refusing merges.
    #[serde(default = "default_tail_cap")]
    pub tail_cap: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_first_sample() -> usize {
    32
}
fn default_later_sample() -> usize {
    48
}
fn default_full_phase_iterations() -> usize {
    10
}
fn default_drop_support() -> usize {
    1
}
fn default_drop_age() -> usize {
    2
}
fn default_min_segments_per_label() -> usize {
    3
}
fn default_tail_cap() -> usize {
    20
}

impl Default for IncrementalConfig {
    fn default() -> Self {
        Self {
            first_sample: default_first_sample(),
            later_sample: default_later_sample(),
            full_phase_iterations: default_full_phase_iterations(),
            drop_support: default_drop_support(),
            drop_age: default_drop_age(),
            min_segments_per_label: default_min_segments_per_label(),
            tail_cap: default_tail_cap(),
            seed: 0,
        }
    }
}

impl IncrementalConfig {
    pub fn validate(&self) -> Result<(), IncrementalError> {
        for (name, v) in [
            ("first_sample", self.first_sample),
            ("later_sample", self.later_sample),
            ("full_phase_iterations", self.full_phase_iterations),
            ("drop_age", self.drop_age),
            ("min_segments_per_label", self.min_segments_per_label),
            ("tail_cap", self.tail_cap),
        ] {
            if v < 1 {
                return Err(IncrementalError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// One code of the evolving codebook. `low_support_age` counts consecutive
/// iterations at or below the drop-support threshold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub code: String,
    pub example_segment_id: String,
    pub segment_ids: Vec<String>,
    pub low_support_age: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    pub entries: Vec<CodebookEntry>,
}

impl Codebook {
    fn find(&self, normalized: &str) -> Option<usize> {
        self.entries.iter().position(|e| normalize_phrase(&e.code) == normalized)
    }

    /// Attach a segment under a code, folding into an existing entry when
    /// the normalized code already exists.
    fn attach(&mut self, code: &str, segment_id: &str) {
        match self.find(&normalize_phrase(code)) {
            Some(i) => {
                let entry = &mut self.entries[i];
                if !entry.segment_ids.iter().any(|s| s == segment_id) {
                    entry.segment_ids.push(segment_id.to_string());
                }
            }
            None => self.entries.push(CodebookEntry {
                code: code.to_string(),
                example_segment_id: segment_id.to_string(),
                segment_ids: vec![segment_id.to_string()],
                low_support_age: 0,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    pub code: String,
    pub segment_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Full,
    Tail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedCluster {
    pub high_level_code: String,
    pub original_codes: Vec<String>,
    /// Cited codes that do not exist in the codebook (or were already merged
    /// this pass); skipped with a logged anomaly.
    pub skipped_codes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum MergeOutcome {
    Applied { clusters: Vec<AppliedCluster> },
    NoOp { reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    pub phase: Phase,
    pub sampled_segment_ids: Vec<String>,
    pub pool_exhausted: bool,
    pub merge: MergeOutcome,
    pub dropped: Vec<DropRecord>,
    /// Codebook snapshot after this iteration's merge and drop steps.
    pub codebook: Vec<CodebookEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncrementalRun {
    pub iterations: Vec<IterationRecord>,
    pub final_codebook: Vec<CodebookEntry>,
    pub dropped: Vec<DropRecord>,
    pub full_phase_end: String,
    pub stop_reason: String,
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub segments: Vec<Segment>,
    /// True when this sample drained the unseen pool (fewer than `n`
    /// available, or exactly the remainder).
    pub exhausted: bool,
}

/// Uniform sample without replacement from segments not yet seen or dropped.
/// Deterministic under `(input order, seed)`.
pub fn sample_unseen(
    all_segments: &[Segment],
    seen_ids: &BTreeSet<String>,
    dropped_ids: &BTreeSet<String>,
    n: usize,
    seed: u64,
) -> Result<SampleOutcome, IncrementalError> {
    if n < 1 {
        return Err(IncrementalError::InvalidConfig("sample size must be >= 1".into()));
    }
    let pool: Vec<&Segment> = all_segments
        .iter()
        .filter(|s| !seen_ids.contains(&s.segment_id) && !dropped_ids.contains(&s.segment_id))
        .collect();
    if pool.is_empty() {
        return Err(IncrementalError::PoolExhausted);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if pool.len() <= n {
        use rand::seq::SliceRandom;
        let mut segments: Vec<Segment> = pool.into_iter().cloned().collect();
        segments.shuffle(&mut rng);
        Ok(SampleOutcome { segments, exhausted: true })
    } else {
        let picks = rand::seq::index::sample(&mut rng, pool.len(), n);
        let segments = picks.iter().map(|i| pool[i].clone()).collect();
        Ok(SampleOutcome { segments, exhausted: false })
    }
}

/// System prompt for the merge step plus the numbered codebook listing (one
/// example segment per code) as the user prompt.
pub fn build_merge_prompt(
    goal: &str,
    codebook: &Codebook,
    segment_texts: &BTreeMap<String, String>,
    opts: &ChatOptions,
) -> ChatRequest {
    let system = MERGE_TEMPLATE.replace("{Goal of Inductive Coding}", goal);
    let mut user = String::new();
    for (i, entry) in codebook.entries.iter().enumerate() {
        let example =
            segment_texts.get(&entry.example_segment_id).map(String::as_str).unwrap_or("");
        user.push_str(&format!("{}. {}\n\n-> {}\n\n", i + 1, entry.code, example));
    }
    ChatRequest::new(opts, system, user)
}

#[derive(Debug, Deserialize)]
struct MergeAnswer {
    clusters: Vec<MergeAnswerCluster>,
}

#[derive(Debug, Deserialize)]
struct MergeAnswerCluster {
    high_level_code: String,
    original_codes: Vec<String>,
    #[allow(dead_code)]
    #[serde(default)]
    justification: String,
}

/// `Ok(None)` means the model answered `N/A` (no merge needed).
fn parse_merge_answer(raw: &str) -> Result<Option<MergeAnswer>, String> {
    let after_marker = match raw.to_lowercase().rfind("ans:") {
        Some(pos) => &raw[pos + 4..],
        None => raw,
    };
    if after_marker.trim_start().to_uppercase().starts_with("N/A") {
        return Ok(None);
    }
    let value = json_relaxed::parse_object_relaxed(after_marker)?;
    let answer: MergeAnswer =
        serde_json::from_value(value).map_err(|e| format!("answer shape: {e}"))?;
    Ok(Some(answer))
}

/// Apply one merge pass: each cluster unions its members' segments under the
/// high-level code, keeping the earliest-processed example segment. A code
/// participates in at most one cluster per pass (no chaining).
fn apply_merge(
    codebook: &Codebook,
    answer: &MergeAnswer,
    seq: &BTreeMap<String, usize>,
) -> (Codebook, Vec<AppliedCluster>) {
    #[derive(Clone)]
    enum Fate {
        Keep,
        Absorbed,
        Anchor(usize),
    }
    let mut fates: Vec<Fate> = vec![Fate::Keep; codebook.entries.len()];
    let mut consumed: BTreeSet<usize> = BTreeSet::new();
    let mut applied: Vec<AppliedCluster> = Vec::new();
    let mut merged_entries: Vec<Option<CodebookEntry>> = Vec::new();

    for cluster in &answer.clusters {
        if cluster.high_level_code.trim().is_empty() {
            tracing::warn!("merge cluster with empty high_level_code skipped");
            continue;
        }
        let mut member_indices: Vec<usize> = Vec::new();
        let mut skipped: Vec<String> = Vec::new();
        for code in &cluster.original_codes {
            let norm = normalize_phrase(code);
            match codebook.find(&norm) {
                Some(i) if !consumed.contains(&i) && !member_indices.contains(&i) => {
                    member_indices.push(i)
                }
                Some(_) => {
                    tracing::warn!(code = %code, "code already merged this pass; skipped");
                    skipped.push(code.clone());
                }
                None => {
                    tracing::warn!(code = %code, "merge cited a code absent from the codebook");
                    skipped.push(code.clone());
                }
            }
        }
        // The high-level code may name an existing entry; fold it in too.
        if let Some(i) = codebook.find(&normalize_phrase(&cluster.high_level_code)) {
            if !consumed.contains(&i) && !member_indices.contains(&i) {
                member_indices.push(i);
            }
        }
        if member_indices.is_empty() {
            applied.push(AppliedCluster {
                high_level_code: cluster.high_level_code.clone(),
                original_codes: Vec::new(),
                skipped_codes: skipped,
            });
            continue;
        }

        let mut segment_ids: Vec<String> = Vec::new();
        for &i in &member_indices {
            for id in &codebook.entries[i].segment_ids {
                if !segment_ids.contains(id) {
                    segment_ids.push(id.clone());
                }
            }
        }
        segment_ids.sort_by_key(|id| seq.get(id).copied().unwrap_or(usize::MAX));
        let example_segment_id = member_indices
            .iter()
            .map(|&i| codebook.entries[i].example_segment_id.clone())
            .min_by_key(|id| seq.get(id).copied().unwrap_or(usize::MAX))
            .expect("non-empty members");

        let anchor = *member_indices.iter().min().expect("non-empty members");
        let cluster_idx = merged_entries.len();
        merged_entries.push(Some(CodebookEntry {
            code: cluster.high_level_code.clone(),
            example_segment_id,
            segment_ids,
            low_support_age: 0,
        }));
        for &i in &member_indices {
            consumed.insert(i);
            fates[i] = if i == anchor { Fate::Anchor(cluster_idx) } else { Fate::Absorbed };
        }
        applied.push(AppliedCluster {
            high_level_code: cluster.high_level_code.clone(),
            original_codes: member_indices
                .iter()
                .map(|&i| codebook.entries[i].code.clone())
                .collect(),
            skipped_codes: skipped,
        });
    }

    let mut out = Codebook::default();
    for (i, entry) in codebook.entries.iter().enumerate() {
        match &fates[i] {
            Fate::Keep => out.entries.push(entry.clone()),
            Fate::Absorbed => {}
            Fate::Anchor(k) => {
                out.entries.push(merged_entries[*k].take().expect("anchor emitted once"));
            }
        }
    }
    (out, applied)
}

/// Run the LLM merge step over the whole codebook. An unparseable answer is
/// retried once past the cache, then the iteration proceeds without a merge.
pub async fn merge_codebook(
    codebook: &Codebook,
    goal: &str,
    segment_texts: &BTreeMap<String, String>,
    seq: &BTreeMap<String, usize>,
    gateway: &Gateway,
    chat: &ChatOptions,
) -> Result<(Codebook, MergeOutcome), IncrementalError> {
    if codebook.entries.is_empty() {
        return Ok((codebook.clone(), MergeOutcome::NoOp { reason: "empty codebook".into() }));
    }
    let request = build_merge_prompt(goal, codebook, segment_texts, chat);
    for attempt in 0..2 {
        let response = match gateway.complete_opts(&request, attempt > 0).await {
            Ok(resp) => resp.text,
            Err(e) if e.is_fatal() => return Err(e.into()),
            Err(e) => {
                tracing::warn!(error = %e, "merge call failed; no-op merge this iteration");
                return Ok((
                    codebook.clone(),
                    MergeOutcome::NoOp { reason: format!("gateway error: {e}") },
                ));
            }
        };
        match parse_merge_answer(&response) {
            Ok(None) => {
                return Ok((
                    codebook.clone(),
                    MergeOutcome::NoOp { reason: "model answered N/A".into() },
                ))
            }
            Ok(Some(answer)) => {
                let (merged, applied) = apply_merge(codebook, &answer, seq);
                return Ok((merged, MergeOutcome::Applied { clusters: applied }));
            }
            Err(e) if attempt == 0 => {
                tracing::warn!(error = %e, "merge answer unparseable; retrying once");
            }
            Err(e) => {
                tracing::warn!(error = %e, "merge answer unparseable after retry; no-op");
                return Ok((
                    codebook.clone(),
                    MergeOutcome::NoOp { reason: format!("unparseable after retry: {e}") },
                ));
            }
        }
    }
    unreachable!("loop returns within two attempts")
}

/// Age low-support entries and drop the ones that stayed low for `drop_age`
/// consecutive iterations. Entries above the support threshold reset to age
/// zero.
pub fn drop_low_support(
    codebook: &Codebook,
    cfg: &IncrementalConfig,
) -> (Codebook, Vec<DropRecord>) {
    let mut kept = Codebook::default();
    let mut dropped = Vec::new();
    for entry in &codebook.entries {
        let mut entry = entry.clone();
        if entry.segment_ids.len() <= cfg.drop_support {
            entry.low_support_age += 1;
            if entry.low_support_age >= cfg.drop_age {
                dropped.push(DropRecord { code: entry.code, segment_ids: entry.segment_ids });
                continue;
            }
        } else {
            entry.low_support_age = 0;
        }
        kept.entries.push(entry);
    }
    (kept, dropped)
}

/// Chat endpoints for the two roles the incremental pipeline needs.
pub struct IncrementalPipelines<'a> {
    pub generation: &'a Gateway,
    pub generation_chat: &'a ChatOptions,
    pub merge: &'a Gateway,
    pub merge_chat: &'a ChatOptions,
}

/// Drive the full incremental pipeline.
///
/// Full-phase iterations sample unseen segments (`first_sample`, then
/// `later_sample`), generate labels, merge, and drop. The full phase ends
/// once `full_phase_iterations` have run and — when gold coverage is
/// supplied — every gold label has at least `min_segments_per_label`
/// processed segments; an exhausted pool ends it early. The tail phase runs
/// merge+drop until every entry's support exceeds `drop_support`, bounded by
/// `tail_cap`.
///
/// Each segment attaches to at most one code: the first label of its
/// generation response. Irrelevant and failed segments count as processed
/// but attach nowhere. Dropped segments never re-enter sampling.
pub async fn run_incremental(
    task: &TaskSpec,
    segments: &[Segment],
    cfg: &IncrementalConfig,
    pipelines: &IncrementalPipelines<'_>,
    gold_coverage: Option<&BTreeMap<String, BTreeSet<String>>>,
) -> Result<IncrementalRun, IncrementalError> {
    cfg.validate()?;
    if segments.is_empty() {
        return Err(IncrementalError::NoSegments);
    }
    let segment_texts: BTreeMap<String, String> =
        segments.iter().map(|s| (s.segment_id.clone(), s.text.clone())).collect();

    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut dropped_ids: BTreeSet<String> = BTreeSet::new();
    let mut processed: BTreeSet<String> = BTreeSet::new();
    let mut seq: BTreeMap<String, usize> = BTreeMap::new();
    let mut codebook = Codebook::default();
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut all_drops: Vec<DropRecord> = Vec::new();

    let coverage_met = |processed: &BTreeSet<String>| -> bool {
        match gold_coverage {
            None => true,
            Some(coverage) => coverage.values().all(|ids| {
                ids.iter().filter(|id| processed.contains(*id)).count()
                    >= cfg.min_segments_per_label
            }),
        }
    };

    // Full phase: generate -> merge -> drop.
    let full_phase_end = loop {
        let index = iterations.len() + 1;
        let want = if index == 1 { cfg.first_sample } else { cfg.later_sample };
        let sample = match sample_unseen(
            segments,
            &seen,
            &dropped_ids,
            want,
            cfg.seed.wrapping_add(index as u64),
        ) {
            Ok(sample) => sample,
            Err(IncrementalError::PoolExhausted) => break "pool_exhausted".to_string(),
            Err(e) => return Err(e),
        };
        for segment in &sample.segments {
            seen.insert(segment.segment_id.clone());
            processed.insert(segment.segment_id.clone());
            let next = seq.len();
            seq.entry(segment.segment_id.clone()).or_insert(next);
        }

        let annotations = generate_labels(
            task,
            &sample.segments,
            pipelines.generation,
            pipelines.generation_chat,
            &GenerateOptions::default(),
        )
        .await?;
        for annotation in &annotations {
            if annotation.irrelevant || annotation.failed {
                continue;
            }
            if let Some(label) = annotation.labels.first() {
                codebook.attach(&label.phrase, &annotation.segment_id);
            }
        }

        let (merged, merge_outcome) = merge_codebook(
            &codebook,
            &task.coding_goal,
            &segment_texts,
            &seq,
            pipelines.merge,
            pipelines.merge_chat,
        )
        .await?;
        codebook = merged;

        let (kept, drops) = drop_low_support(&codebook, cfg);
        codebook = kept;
        for drop in &drops {
            for id in &drop.segment_ids {
                seen.remove(id);
                dropped_ids.insert(id.clone());
            }
        }
        all_drops.extend(drops.clone());

        iterations.push(IterationRecord {
            index,
            phase: Phase::Full,
            sampled_segment_ids: sample.segments.iter().map(|s| s.segment_id.clone()).collect(),
            pool_exhausted: sample.exhausted,
            merge: merge_outcome,
            dropped: drops,
            codebook: codebook.entries.clone(),
        });

        if index >= cfg.full_phase_iterations && coverage_met(&processed) {
            break if gold_coverage.is_some() {
                "iterations_and_coverage_met".to_string()
            } else {
                "iterations_completed".to_string()
            };
        }
        if sample.exhausted {
            break "pool_exhausted".to_string();
        }
    };

    // Tail phase: merge + drop only, until every code clears the support bar.
    let mut tail_rounds = 0usize;
    let stop_reason = loop {
        if codebook.entries.iter().all(|e| e.segment_ids.len() > cfg.drop_support) {
            break "tail_support_met".to_string();
        }
        if tail_rounds >= cfg.tail_cap {
            break "tail_cap_reached".to_string();
        }
        tail_rounds += 1;
        let index = iterations.len() + 1;

        let (merged, merge_outcome) = merge_codebook(
            &codebook,
            &task.coding_goal,
            &segment_texts,
            &seq,
            pipelines.merge,
            pipelines.merge_chat,
        )
        .await?;
        codebook = merged;
        let (kept, drops) = drop_low_support(&codebook, cfg);
        codebook = kept;
        for drop in &drops {
            for id in &drop.segment_ids {
                seen.remove(id);
                dropped_ids.insert(id.clone());
            }
        }
        all_drops.extend(drops.clone());

        iterations.push(IterationRecord {
            index,
            phase: Phase::Tail,
            sampled_segment_ids: Vec::new(),
            pool_exhausted: false,
            merge: merge_outcome,
            dropped: drops,
            codebook: codebook.entries.clone(),
        });
    };

    Ok(IncrementalRun {
        iterations,
        final_codebook: codebook.entries,
        dropped: all_drops,
        full_phase_end,
        stop_reason,
    })
}
