//! Theme reassignment: a second pass over the data that attaches the best
//! final theme to every segment. The resulting per-theme segment sets feed
//! the segment-level metrics.

use std::path::PathBuf;

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointLog;
use crate::corpus::Segment;
use crate::gateway::{cosine_similarity, ChatOptions, ChatRequest, Gateway, GatewayError};
use crate::labeling::normalize_phrase;

/// User-prompt template for the reassignment pass (there is no system
/// prompt). `<codebook>` becomes the numbered theme list, `<text_segment>`
/// the segment body.
const REASSIGNMENT_TEMPLATE: &str = r#"{Goal of inductive coding}
Analyze the following segment to identify the best label from the codebook that should be assigned to this segment.

Segment will be given like below:
Segment:<segment text>

The existing codebook will be provided following this example below:
Codebook: 1. <code>, 2. <code>, ... , n. <code>

Provide your answers following this output format example below:
Ans: Cyber Harassment

Now given the existing codebook and the segment below, provide your answer following the format given above.
Codebook: <codebook>
Segment: <text_segment>"#;

#[derive(Debug, Error)]
pub enum AssignmentError {
    #[error("no themes to assign")]
    NoThemes,
    #[error("no segments to assign")]
    NoSegments,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("checkpoint io: {0}")]
    Checkpoint(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    /// Answer matched a theme phrase after normalization.
    Exact,
    /// Answer matched via embedding similarity above the fuzzy threshold.
    Fuzzy,
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeAssignment {
    pub segment_id: String,
    pub theme_id: Option<String>,
    pub theme_phrase: Option<String>,
    pub resolution: Resolution,
    pub raw_answer: String,
}

/// Embedding access used to resolve paraphrased answers.
#[derive(Debug, Clone)]
pub struct FuzzyMatcher {
    pub model_id: String,
    /// Cosine-similarity floor for accepting a paraphrased answer.
    pub threshold: f64,
}

impl FuzzyMatcher {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self { model_id: model_id.into(), threshold: 0.8 }
    }
}

/// Fill the reassignment template with the numbered theme list and segment
/// text. The template is a pure user prompt.
pub fn build_assignment_prompt(
    goal: &str,
    themes: &[String],
    segment: &Segment,
    opts: &ChatOptions,
) -> ChatRequest {
    let codebook = themes
        .iter()
        .enumerate()
        .map(|(i, phrase)| format!("{}. {}", i + 1, phrase))
        .collect::<Vec<_>>()
        .join(", ");
    let user = REASSIGNMENT_TEMPLATE
        .replace("{Goal of inductive coding}", goal)
        .replace("<codebook>", &codebook)
        .replace("<text_segment>", &segment.text);
    ChatRequest::new(opts, String::new(), user)
}

/// Extract the answer after the last `Ans:` marker (first non-empty line of
/// whatever follows). Falls back to the whole response when the marker is
/// missing.
fn extract_answer(raw: &str) -> String {
    let after = match raw.to_lowercase().rfind("ans:") {
        Some(pos) => &raw[pos + 4..],
        None => raw,
    };
    after.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("").to_string()
}

/// Resolve a raw model answer against the theme list: exact normalized
/// match, then highest-cosine fuzzy match above the threshold, else
/// unresolved. Unresolved is a value, not an error.
pub async fn parse_assignment(
    raw: &str,
    themes: &[(String, String)],
    embeddings: &Gateway,
    fuzzy: &FuzzyMatcher,
) -> ThemeAssignment {
    let answer = extract_answer(raw);
    let unresolved = ThemeAssignment {
        segment_id: String::new(),
        theme_id: None,
        theme_phrase: None,
        resolution: Resolution::Unresolved,
        raw_answer: raw.to_string(),
    };
    if answer.is_empty() {
        return unresolved;
    }
    let normalized = normalize_phrase(&answer);
    for (id, phrase) in themes {
        if normalize_phrase(phrase) == normalized {
            return ThemeAssignment {
                segment_id: String::new(),
                theme_id: Some(id.clone()),
                theme_phrase: Some(phrase.clone()),
                resolution: Resolution::Exact,
                raw_answer: raw.to_string(),
            };
        }
    }

    // Fuzzy ladder: embed the answer alongside every theme phrase.
    let mut texts: Vec<String> = Vec::with_capacity(themes.len() + 1);
    texts.push(answer.clone());
    texts.extend(themes.iter().map(|(_, phrase)| phrase.clone()));
    let vectors = match embeddings.embed_batch(&fuzzy.model_id, &texts).await {
        Ok(v) => v,
        Err(e) => {
            tracing::warn!(error = %e, "fuzzy embedding failed; answer left unresolved");
            return unresolved;
        }
    };
    let answer_vec = &vectors[0];
    let mut best: Option<(usize, f64)> = None;
    for (i, vector) in vectors[1..].iter().enumerate() {
        let sim = match cosine_similarity(answer_vec, vector) {
            Ok(s) => s,
            Err(_) => continue,
        };
        if best.map(|(_, b)| sim > b).unwrap_or(true) {
            best = Some((i, sim));
        }
    }
    match best {
        Some((i, sim)) if sim > fuzzy.threshold => ThemeAssignment {
            segment_id: String::new(),
            theme_id: Some(themes[i].0.clone()),
            theme_phrase: Some(themes[i].1.clone()),
            resolution: Resolution::Fuzzy,
            raw_answer: raw.to_string(),
        },
        _ => unresolved,
    }
}

#[derive(Debug, Clone, Default)]
pub struct AssignOptions {
    pub checkpoint: Option<PathBuf>,
}

/// Endpoints the assignment pass needs: a chat model for the reassignment
/// prompt and an embedder for the fuzzy ladder.
pub struct AssignmentPipelines<'a> {
    pub chat: &'a Gateway,
    pub chat_options: &'a ChatOptions,
    pub embeddings: &'a Gateway,
    pub fuzzy: &'a FuzzyMatcher,
}

/// Assign one theme to every segment: concurrent, order-preserving,
/// checkpointed. Per-segment chat failures yield unresolved placeholders.
pub async fn assign_all(
    goal: &str,
    themes: &[(String, String)],
    segments: &[Segment],
    pipelines: &AssignmentPipelines<'_>,
    opts: &AssignOptions,
) -> Result<Vec<ThemeAssignment>, AssignmentError> {
    if themes.is_empty() {
        return Err(AssignmentError::NoThemes);
    }
    if segments.is_empty() {
        return Err(AssignmentError::NoSegments);
    }
    let phrases: Vec<String> = themes.iter().map(|(_, p)| p.clone()).collect();
    let checkpoint = match &opts.checkpoint {
        Some(path) => {
            Some(CheckpointLog::<ThemeAssignment>::open(path, |r| r.segment_id.clone())?)
        }
        None => None,
    };

    let mut assignments = Vec::with_capacity(segments.len());
    {
        let mut stream = futures::stream::iter(segments.iter().map(|segment| {
            let done = checkpoint.as_ref().and_then(|c| c.get(&segment.segment_id)).cloned();
            let phrases = &phrases;
            async move {
                match done {
                    Some(record) => Ok::<_, AssignmentError>((record, true)),
                    None => {
                        let assignment =
                            assign_one(goal, themes, phrases, segment, pipelines).await?;
                        Ok((assignment, false))
                    }
                }
            }
        }))
        .buffered(pipelines.chat.max_concurrency());

        while let Some(result) = stream.next().await {
            let (assignment, resumed) = result?;
            if !resumed {
                if let Some(log) = &checkpoint {
                    log.record(&assignment)?;
                }
            }
            assignments.push(assignment);
        }
    }
    debug_assert_eq!(assignments.len(), segments.len());
    Ok(assignments)
}

async fn assign_one(
    goal: &str,
    themes: &[(String, String)],
    phrases: &[String],
    segment: &Segment,
    pipelines: &AssignmentPipelines<'_>,
) -> Result<ThemeAssignment, AssignmentError> {
    let request = build_assignment_prompt(goal, phrases, segment, pipelines.chat_options);
    let raw = match pipelines.chat.complete(&request).await {
        Ok(resp) => resp.text,
        Err(e) if e.is_fatal() => return Err(e.into()),
        Err(e) => {
            tracing::warn!(segment = %segment.segment_id, error = %e, "assignment call failed");
            return Ok(ThemeAssignment {
                segment_id: segment.segment_id.clone(),
                theme_id: None,
                theme_phrase: None,
                resolution: Resolution::Unresolved,
                raw_answer: format!("gateway error: {e}"),
            });
        }
    };
    let mut assignment =
        parse_assignment(&raw, themes, pipelines.embeddings, pipelines.fuzzy).await;
    assignment.segment_id = segment.segment_id.clone();
    Ok(assignment)
}
