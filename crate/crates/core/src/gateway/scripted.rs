//! Deterministic offline providers, selected with `scripted://` endpoint
//! URLs. They recognize the pipeline's prompt shapes and answer with
//! rule-derived text, so full runs work without network access and are
//! byte-reproducible.
//!
//! Chat rules:
//! - label generation: segments containing the token `noise` are marked
//!   irrelevant; otherwise labels are built from the first content words
//!   (lowercase, length >= 4) of the segment, one or two labels per segment.
//! - clustering: batch items are grouped by their first word (or by its
//!   first letter once items are already `... themes` phrases), producing
//!   `<key> themes` clusters.
//! - codebook merging: codes sharing a leading word merge under
//!   `<word> group`; with no shareable codes the answer is `Ans: N/A`.
//! - reassignment: picks the codebook entry with the highest word overlap,
//!   falling back to a first-letter match, then to the first entry.
//!
//! The embedding provider feature-hashes lowercase tokens into a fixed
//! number of dimensions, so similar phrases get similar vectors.
//!
//! Fault injection: `scripted://chat?abort_after=N` (or the
//! `INDUCT_SCRIPTED_ABORT_AFTER` environment variable, which wins) makes the
//! chat provider fail every call after the first N, simulating a killed run
//! for resume testing.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};

use super::{BackendChat, BackendError, ChatBackend, ChatRequest, EmbeddingBackend, FinishReason, GatewayError};

pub const URL_SCHEME: &str = "scripted://";

/// Environment override for the abort knob; kept out of the config file so
/// an interrupted run and its resume share one config hash.
pub const ABORT_ENV_VAR: &str = "INDUCT_SCRIPTED_ABORT_AFTER";

pub struct ScriptedBackends {
    pub chat: RuleChat,
    pub embeddings: HashEmbed,
}

impl ScriptedBackends {
    pub fn from_url(url: &str) -> Result<Self, GatewayError> {
        let rest = url
            .strip_prefix(URL_SCHEME)
            .ok_or_else(|| GatewayError::InvalidRequest(format!("not a scripted url: {url}")))?;
        let query = rest.split_once('?').map(|(_, q)| q).unwrap_or("");
        let mut abort_after = None;
        let mut dims = 32usize;
        for pair in query.split('&').filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| GatewayError::InvalidRequest(format!("bad query pair `{pair}`")))?;
            match k {
                "abort_after" => {
                    abort_after = Some(v.parse::<u64>().map_err(|_| {
                        GatewayError::InvalidRequest(format!("abort_after must be an integer, got `{v}`"))
                    })?);
                }
                "dims" => {
                    dims = v.parse::<usize>().map_err(|_| {
                        GatewayError::InvalidRequest(format!("dims must be an integer, got `{v}`"))
                    })?;
                    if dims == 0 {
                        return Err(GatewayError::InvalidRequest("dims must be >= 1".into()));
                    }
                }
                other => {
                    return Err(GatewayError::InvalidRequest(format!(
                        "unknown scripted parameter `{other}`"
                    )));
                }
            }
        }
        if let Ok(env) = std::env::var(ABORT_ENV_VAR) {
            if !env.is_empty() {
                abort_after = Some(env.parse::<u64>().map_err(|_| {
                    GatewayError::InvalidRequest(format!("{ABORT_ENV_VAR} must be an integer"))
                })?);
            }
        }
        Ok(Self { chat: RuleChat::new(abort_after), embeddings: HashEmbed::new(dims) })
    }
}

pub struct RuleChat {
    abort_after: Option<u64>,
    calls: AtomicU64,
}

impl RuleChat {
    pub fn new(abort_after: Option<u64>) -> Self {
        Self { abort_after, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn respond(&self, req: &ChatRequest) -> String {
        let system = &req.system_prompt;
        let user = &req.user_prompt;
        // Markers mirror the stage prompt templates.
        if system.contains("LABEL: [The phrase of the label]") {
            generation_response(user)
        } else if system.contains("cluster the codes into clusters") {
            merge_response(user)
        } else if system.contains("MEANINGFUL and INSIGHTFUL THEMES") {
            clustering_response(user)
        } else if user.contains("Codebook:") && user.contains("Ans:") {
            assignment_response(user)
        } else {
            "LABEL: [Irrelevant]".to_string()
        }
    }
}

#[async_trait::async_trait]
impl ChatBackend for RuleChat {
    async fn complete(&self, req: &ChatRequest) -> Result<BackendChat, BackendError> {
        let seen = self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(limit) = self.abort_after {
            if seen >= limit {
                return Err(BackendError::Aborted);
            }
        }
        let text = self.respond(req);
        Ok(BackendChat {
            prompt_tokens: (req.system_prompt.split_whitespace().count()
                + req.user_prompt.split_whitespace().count()) as u64,
            completion_tokens: text.split_whitespace().count() as u64,
            text,
            finish_reason: FinishReason::Stop,
        })
    }
}

fn tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn content_words(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    tokens(text)
        .into_iter()
        .filter(|t| t.chars().count() >= 4)
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

fn generation_response(segment: &str) -> String {
    let words = content_words(segment);
    if words.is_empty() || tokens(segment).iter().any(|t| t == "noise") {
        return "LABEL: [Irrelevant]".to_string();
    }
    let mut lines = Vec::new();
    lines.push(format!("LABEL: [{}]", words[..words.len().min(2)].join(" ")));
    if words.len() >= 4 {
        lines.push(format!("LABEL: [{}]", words[2..4].join(" ")));
    }
    lines.join("\n")
}

fn cluster_key(item: &str) -> String {
    let toks = tokens(item);
    let first = toks.first().cloned().unwrap_or_else(|| "misc".to_string());
    if toks.last().map(|t| t == "themes").unwrap_or(false) {
        first.chars().next().map(|c| c.to_string()).unwrap_or(first)
    } else {
        first
    }
}

fn clustering_response(user: &str) -> String {
    let items: Vec<&str> = user.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let mut groups: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for item in items {
        groups.entry(format!("{} themes", cluster_key(item))).or_default().push(item);
    }
    let mut object = serde_json::Map::new();
    for (phrase, members) in groups {
        object.insert(
            phrase,
            serde_json::Value::Array(
                members.into_iter().map(|m| serde_json::Value::String(m.to_string())).collect(),
            ),
        );
    }
    serde_json::to_string_pretty(&serde_json::Value::Object(object))
        .expect("string map serializes")
}

fn merge_response(user: &str) -> String {
    let mut codes: Vec<String> = Vec::new();
    for line in user.lines() {
        let line = line.trim();
        if let Some((num, rest)) = line.split_once('.') {
            if num.chars().all(|c| c.is_ascii_digit()) && !num.is_empty() {
                let code = rest.trim();
                if !code.is_empty() {
                    codes.push(code.to_string());
                }
            }
        }
    }
    let mut groups: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for code in &codes {
        let key = tokens(code).into_iter().next().unwrap_or_else(|| "misc".to_string());
        groups.entry(key).or_default().push(code);
    }
    let clusters: Vec<serde_json::Value> = groups
        .into_iter()
        .filter(|(_, members)| members.len() >= 2)
        .map(|(word, members)| {
            serde_json::json!({
                "high_level_code": format!("{word} group"),
                "original_codes": members,
                "justification": format!("codes share the leading term '{word}'"),
            })
        })
        .collect();
    if clusters.is_empty() {
        "Ans: N/A".to_string()
    } else {
        format!(
            "Ans:\n{}",
            serde_json::to_string_pretty(&serde_json::json!({ "clusters": clusters }))
                .expect("clusters serialize")
        )
    }
}

fn assignment_response(user: &str) -> String {
    let codebook_line = user
        .rsplit("Codebook:")
        .next()
        .unwrap_or("")
        .lines()
        .next()
        .unwrap_or("")
        .trim();
    let codes: Vec<String> = codebook_line
        .split(", ")
        .map(|entry| {
            entry
                .trim()
                .trim_start_matches(|c: char| c.is_ascii_digit())
                .trim_start_matches('.')
                .trim()
                .to_string()
        })
        .filter(|c| !c.is_empty())
        .collect();
    if codes.is_empty() {
        return "Ans: ".to_string();
    }
    let segment = user.rsplit("Segment:").next().unwrap_or("").trim();
    let seg_words: BTreeSet<String> = tokens(segment).into_iter().collect();
    let mut best: Option<(usize, usize)> = None; // (score, index)
    for (i, code) in codes.iter().enumerate() {
        let overlap = tokens(code).iter().filter(|w| seg_words.contains(*w)).count();
        if overlap > 0 && best.map(|(s, _)| overlap > s).unwrap_or(true) {
            best = Some((overlap, i));
        }
    }
    let pick = best.map(|(_, i)| i).or_else(|| {
        let first_char = content_words(segment)
            .first()
            .and_then(|w| w.chars().next());
        first_char.and_then(|c| {
            codes.iter().position(|code| {
                tokens(code).first().and_then(|w| w.chars().next()) == Some(c)
            })
        })
    });
    format!("Ans: {}", codes[pick.unwrap_or(0)])
}

/// Feature-hash bag-of-words embedder. Tokens are hashed into `dims`
/// buckets; the gateway unit-normalizes the resulting counts.
pub struct HashEmbed {
    dims: usize,
}

impl HashEmbed {
    pub fn new(dims: usize) -> Self {
        Self { dims }
    }

    fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut toks = tokens(text);
        if toks.is_empty() {
            toks.push(format!("blank{}", text.len()));
        }
        let mut values = vec![0.0f64; self.dims];
        for tok in toks {
            values[(fnv1a64(tok.as_bytes()) % self.dims as u64) as usize] += 1.0;
        }
        values
    }
}

#[async_trait::async_trait]
impl EmbeddingBackend for HashEmbed {
    async fn embed(&self, _model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
