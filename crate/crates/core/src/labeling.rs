//! Label generation: build the generation prompt from the user's task
//! framing, call the chat model once per segment, and parse the strict
//! `LABEL: [...]` output grammar into per-segment annotations.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use futures::StreamExt;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointLog;
use crate::corpus::Segment;
use crate::gateway::{ChatOptions, ChatRequest, Gateway, GatewayError};

/// The prompt scaffold around the two user-provided components. Substituted
/// verbatim; the grammar below parses exactly the format it mandates.
const GENERATION_TEMPLATE: &str = r#"{Background Information}

{Goal of Inductive Coding}
Instruction:
- Label the input only when it is HIGHLY RELEVANT and USEFUL for {Goal of Inductive Coding}.
- Then, define the phrase of the label. The label description should be observational, concise and clear.
- ONLY output the label and DO NOT output any explanation.

Format:
- Define the label using the format "LABEL: [The phrase of the label]".
- If there are multiple labels, each label is a new line.
- If the input is irrelevant, use "LABEL: [Irrelevant]".
- The label MUST NOT exceed 5 words."#;

#[derive(Debug, Error)]
pub enum LabelingError {
    #[error("task spec invalid: {0}")]
    InvalidTask(String),
    #[error("no segments to label")]
    NoSegments,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("checkpoint io: {0}")]
    Checkpoint(#[from] std::io::Error),
}

#[derive(Debug, Error)]
#[error("no parseable LABEL lines in response")]
pub struct LabelParseError;

/// The user's background description plus the coding goal; these two strings
/// parameterize every prompt in the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub background_info: String,
    pub coding_goal: String,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), LabelingError> {
        if self.background_info.trim().is_empty() {
            return Err(LabelingError::InvalidTask("background_info is empty".into()));
        }
        if self.coding_goal.trim().is_empty() {
            return Err(LabelingError::InvalidTask("coding_goal is empty".into()));
        }
        Ok(())
    }
}

/// A single parsed label: raw phrase as emitted plus its normalized form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedLabel {
    pub phrase: String,
    pub normalized: String,
    pub word_count: usize,
}

impl GeneratedLabel {
    fn from_phrase(phrase: &str) -> Option<Self> {
        let normalized = normalize_phrase(phrase);
        if normalized.is_empty() {
            return None;
        }
        let word_count = normalized.split_whitespace().count();
        Some(Self { phrase: phrase.to_string(), normalized, word_count })
    }

    /// The template instructs "MUST NOT exceed 5 words"; models sometimes
    /// violate it. Over-length labels are kept but flagged.
    pub fn over_length(&self) -> bool {
        self.word_count > 5
    }
}

/// Normalization used for label identity everywhere downstream: lowercase,
/// collapse internal whitespace, strip non-alphanumeric characters at the
/// ends. Stemming is deliberately not applied.
pub fn normalize_phrase(phrase: &str) -> String {
    let lowered = phrase.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.trim_matches(|c: char| !c.is_alphanumeric()).to_string()
}

/// Outcome of parsing one model response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelParse {
    pub labels: Vec<GeneratedLabel>,
    pub irrelevant: bool,
    pub anomalies: Vec<String>,
}

/// Per-segment annotation. `irrelevant` and `failed` are mutually exclusive
/// with a non-empty label list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentAnnotation {
    pub segment_id: String,
    pub irrelevant: bool,
    pub failed: bool,
    pub labels: Vec<GeneratedLabel>,
    pub raw_response: String,
}

/// Wire/artifact shape for `annotations.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub segment_id: String,
    pub irrelevant: bool,
    pub labels: Vec<String>,
    pub normalized: Vec<String>,
    pub raw_response: String,
    #[serde(default)]
    pub failed: bool,
}

impl From<&SegmentAnnotation> for AnnotationRecord {
    fn from(a: &SegmentAnnotation) -> Self {
        Self {
            segment_id: a.segment_id.clone(),
            irrelevant: a.irrelevant,
            labels: a.labels.iter().map(|l| l.phrase.clone()).collect(),
            normalized: a.labels.iter().map(|l| l.normalized.clone()).collect(),
            raw_response: a.raw_response.clone(),
            failed: a.failed,
        }
    }
}

impl From<AnnotationRecord> for SegmentAnnotation {
    fn from(r: AnnotationRecord) -> Self {
        let labels = r
            .labels
            .iter()
            .zip(&r.normalized)
            .map(|(phrase, normalized)| GeneratedLabel {
                phrase: phrase.clone(),
                normalized: normalized.clone(),
                word_count: normalized.split_whitespace().count(),
            })
            .collect();
        Self {
            segment_id: r.segment_id,
            irrelevant: r.irrelevant,
            failed: r.failed,
            labels,
            raw_response: r.raw_response,
        }
    }
}

/// Build the generation request: template as the system prompt (background
/// and goal substituted verbatim), segment text as the user prompt.
pub fn build_generation_prompt(
    task: &TaskSpec,
    segment: &Segment,
    opts: &ChatOptions,
) -> ChatRequest {
    let system = GENERATION_TEMPLATE
        .replace("{Background Information}", &task.background_info)
        .replace("{Goal of Inductive Coding}", &task.coding_goal);
    ChatRequest::new(opts, system, segment.text.clone())
}

fn label_line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)label\s*:\s*\[([^\]\[]*)\]").expect("static regex"))
}

/// Render labels back into the output grammar (used by tests and scripted
/// fixtures; parse ∘ render is the identity on normalized content).
pub fn render_label_lines(parse: &LabelParse) -> String {
    if parse.irrelevant {
        return "LABEL: [Irrelevant]".to_string();
    }
    parse
        .labels
        .iter()
        .map(|l| format!("LABEL: [{}]", l.phrase))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parse the `LABEL: [...]` grammar out of a full model response.
///
/// Case-insensitive on `LABEL`, tolerant of surrounding prose and
/// whitespace. Duplicate normalized phrases are dropped, an Irrelevant
/// marker mixed with real labels keeps the labels and logs the anomaly, and
/// a response with zero parseable lines is a parse error.
pub fn parse_label_lines(raw: &str) -> Result<LabelParse, LabelParseError> {
    let mut labels: Vec<GeneratedLabel> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut irrelevant_markers = 0usize;
    let mut anomalies = Vec::new();
    let mut parseable_lines = 0usize;

    for captures in label_line_regex().captures_iter(raw) {
        parseable_lines += 1;
        let phrase = captures[1].trim().to_string();
        match GeneratedLabel::from_phrase(&phrase) {
            None => anomalies.push(format!("empty label phrase in `{}`", &captures[0])),
            Some(label) if label.normalized == "irrelevant" => irrelevant_markers += 1,
            Some(label) => {
                if label.over_length() {
                    anomalies.push(format!(
                        "label `{}` exceeds 5 words ({}); kept",
                        label.phrase, label.word_count
                    ));
                }
                if seen.insert(label.normalized.clone()) {
                    labels.push(label);
                } else {
                    anomalies.push(format!("duplicate label `{}` dropped", label.normalized));
                }
            }
        }
    }

    if parseable_lines == 0 {
        return Err(LabelParseError);
    }
    if !labels.is_empty() {
        if irrelevant_markers > 0 {
            anomalies.push("Irrelevant marker mixed with real labels; labels kept".to_string());
        }
        Ok(LabelParse { labels, irrelevant: false, anomalies })
    } else if irrelevant_markers > 0 {
        Ok(LabelParse { labels: Vec::new(), irrelevant: true, anomalies })
    } else {
        // Only empty-phrase lines matched.
        Err(LabelParseError)
    }
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    /// Resume log; completed segments found here are never re-requested.
    pub checkpoint: Option<PathBuf>,
}

/// Label every segment, one chat call each, concurrently up to the gateway
/// limit. Output order always matches input order. Per-segment failures
/// (transport exhaustion, unparseable responses after one retry) become
/// failed placeholders; only a provider abort stops the run.
pub async fn generate_labels(
    task: &TaskSpec,
    segments: &[Segment],
    gateway: &Gateway,
    chat: &ChatOptions,
    opts: &GenerateOptions,
) -> Result<Vec<SegmentAnnotation>, LabelingError> {
    task.validate()?;
    if segments.is_empty() {
        return Err(LabelingError::NoSegments);
    }
    let checkpoint = match &opts.checkpoint {
        Some(path) => Some(CheckpointLog::<AnnotationRecord>::open(path, |r| r.segment_id.clone())?),
        None => None,
    };

    let mut annotations = Vec::with_capacity(segments.len());
    {
        let mut stream = futures::stream::iter(segments.iter().map(|segment| {
            let done = checkpoint
                .as_ref()
                .and_then(|c| c.get(&segment.segment_id))
                .cloned();
            async move {
                match done {
                    Some(record) => Ok((SegmentAnnotation::from(record), true)),
                    None => annotate_one(task, segment, gateway, chat).await.map(|a| (a, false)),
                }
            }
        }))
        .buffered(gateway.max_concurrency());

        while let Some(result) = stream.next().await {
            let (annotation, resumed) = result?;
            if !resumed {
                if let Some(log) = &checkpoint {
                    log.record(&AnnotationRecord::from(&annotation))?;
                }
            }
            annotations.push(annotation);
        }
    }
    debug_assert_eq!(annotations.len(), segments.len());
    Ok(annotations)
}

async fn annotate_one(
    task: &TaskSpec,
    segment: &Segment,
    gateway: &Gateway,
    chat: &ChatOptions,
) -> Result<SegmentAnnotation, LabelingError> {
    let request = build_generation_prompt(task, segment, chat);
    let mut raw = match gateway.complete(&request).await {
        Ok(resp) => {
            if resp.finish_reason == crate::gateway::FinishReason::Length {
                tracing::warn!(segment = %segment.segment_id, "response hit the token limit; labels may be truncated");
            }
            resp.text
        }
        Err(e) if e.is_fatal() => return Err(e.into()),
        Err(e) => {
            return Ok(failed_annotation(segment, &format!("gateway error: {e}")));
        }
    };
    let mut parsed = parse_label_lines(&raw);
    if parsed.is_err() {
        // One retry past the cache, then give up on this segment.
        match gateway.complete_opts(&request, true).await {
            Ok(resp) => {
                raw = resp.text;
                parsed = parse_label_lines(&raw);
            }
            Err(e) if e.is_fatal() => return Err(e.into()),
            Err(e) => {
                return Ok(failed_annotation(segment, &format!("gateway error on retry: {e}")));
            }
        }
    }
    match parsed {
        Ok(parse) => {
            for anomaly in &parse.anomalies {
                tracing::warn!(segment = %segment.segment_id, %anomaly, "label parse anomaly");
            }
            Ok(SegmentAnnotation {
                segment_id: segment.segment_id.clone(),
                irrelevant: parse.irrelevant,
                failed: false,
                labels: parse.labels,
                raw_response: raw,
            })
        }
        Err(_) => {
            tracing::warn!(segment = %segment.segment_id, "unparseable after retry; recording failed placeholder");
            Ok(failed_annotation(segment, &raw))
        }
    }
}

fn failed_annotation(segment: &Segment, raw: &str) -> SegmentAnnotation {
    SegmentAnnotation {
        segment_id: segment.segment_id.clone(),
        irrelevant: false,
        failed: true,
        labels: Vec::new(),
        raw_response: raw.to_string(),
    }
}

/// One entry of the label pool: a distinct normalized label and every
/// segment it was generated for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub label: String,
    pub segment_ids: Vec<String>,
}

/// Group identical normalized labels across segments, excluding irrelevant
/// and failed annotations. Entries are ordered lexicographically; segment
/// references keep annotation order.
pub fn label_pool(annotations: &[SegmentAnnotation]) -> Vec<PoolEntry> {
    let mut pool: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for annotation in annotations {
        if annotation.irrelevant || annotation.failed {
            continue;
        }
        for label in &annotation.labels {
            pool.entry(label.normalized.clone())
                .or_default()
                .push(annotation.segment_id.clone());
        }
    }
    pool.into_iter().map(|(label, segment_ids)| PoolEntry { label, segment_ids }).collect()
}
