//! Corpus loading and deterministic segmentation.
//!
//! Documents arrive as JSONL records or a directory of `.txt` files and are
//! carved into [`Segment`]s, the atomic unit every downstream stage keys on.
//! Segmentation is a pure function of `(document, policy)` so reruns produce
//! identical segment ids and texts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("record at line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("duplicate document id `{doc_id}`")]
    DuplicateId { doc_id: String },
    #[error("document `{doc_id}` has no text after ingestion")]
    EmptyDocument { doc_id: String },
    #[error("document `{doc_id}` produced no segments")]
    NoSegments { doc_id: String },
    #[error("invalid segmentation policy: {0}")]
    InvalidPolicy(String),
}

/// A raw document prior to segmentation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub source_ref: String,
    pub raw_text: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// One unit of analysis carved out of a document. `position` is the
/// zero-based ordinal within the parent document; ids are
/// `"{doc_id}:{position}"` so they stay stable and debuggable across reruns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: String,
    pub doc_id: String,
    pub position: usize,
    pub text: String,
}

impl Segment {
    pub fn char_length(&self) -> usize {
        self.text.chars().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentationMode {
    Paragraph,
    WholeDocument,
}

/// Selects between paragraph-level segmentation (long documents) and passing
/// inputs through whole (datasets whose records are already the unit of
/// analysis, e.g. single queries).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentationPolicy {
    pub mode: SegmentationMode,
    /// Segments shorter than this are merged into the following segment
    /// (or the preceding one, for a short final segment).
    pub min_chars: usize,
    /// Segments longer than this are split at sentence boundaries. A single
    /// sentence exceeding the bound is kept whole.
    pub max_chars: usize,
}

impl Default for SegmentationPolicy {
    fn default() -> Self {
        Self { mode: SegmentationMode::Paragraph, min_chars: 1, max_chars: 4000 }
    }
}

impl SegmentationPolicy {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.min_chars < 1 {
            return Err(CorpusError::InvalidPolicy("min_chars must be >= 1".into()));
        }
        if self.max_chars <= self.min_chars {
            return Err(CorpusError::InvalidPolicy(format!(
                "max_chars ({}) must exceed min_chars ({})",
                self.max_chars, self.min_chars
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    Jsonl,
    TextDirectory,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    text: Option<String>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// Load documents from a JSONL file (`id` + `text` required per record) or a
/// directory of `.txt` files (ids derived from file stems). Text is
/// NFC-normalized at ingestion so cache keys are stable across encodings.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Document>, CorpusError> {
    match format {
        CorpusFormat::Jsonl => load_jsonl(path),
        CorpusFormat::TextDirectory => load_text_directory(path),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), source }
}

fn load_jsonl(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let content = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut docs = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line)
            .map_err(|e| CorpusError::Record { line: line_no, message: e.to_string() })?;
        let id = raw.id.ok_or_else(|| CorpusError::Record {
            line: line_no,
            message: "missing required field `id`".into(),
        })?;
        let text = raw.text.ok_or_else(|| CorpusError::Record {
            line: line_no,
            message: "missing required field `text`".into(),
        })?;
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { doc_id: id });
        }
        let normalized: String = text.nfc().collect();
        if normalized.trim().is_empty() {
            return Err(CorpusError::EmptyDocument { doc_id: id });
        }
        docs.push(Document {
            doc_id: id,
            source_ref: format!("{}:{}", path.display(), line_no),
            raw_text: normalized,
            metadata: raw.meta,
        });
    }
    Ok(docs)
}

fn load_text_directory(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let mut files: Vec<_> = fs::read_dir(path)
        .map_err(|e| io_err(path, e))?
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| io_err(path, e))?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "txt").unwrap_or(false))
        .collect();
    files.sort();
    let mut docs = Vec::new();
    let mut seen = BTreeSet::new();
    for file in files {
        let stem = file
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        if !seen.insert(stem.clone()) {
            return Err(CorpusError::DuplicateId { doc_id: stem });
        }
        let text = fs::read_to_string(&file).map_err(|e| io_err(&file, e))?;
        let normalized: String = text.nfc().collect();
        if normalized.trim().is_empty() {
            return Err(CorpusError::EmptyDocument { doc_id: stem });
        }
        docs.push(Document {
            doc_id: stem,
            source_ref: file.display().to_string(),
            raw_text: normalized,
            metadata: BTreeMap::new(),
        });
    }
    Ok(docs)
}

/// Split a document into segments under the given policy.
///
/// Paragraph mode splits on runs of one or more blank lines, merges
/// sub-`min_chars` fragments into their neighbor, and splits oversize
/// paragraphs at sentence boundaries. Whole-document mode yields exactly one
/// segment holding the trimmed text.
pub fn segment_document(
    doc: &Document,
    policy: &SegmentationPolicy,
) -> Result<Vec<Segment>, CorpusError> {
    policy.validate()?;
    let texts = match policy.mode {
        SegmentationMode::WholeDocument => {
            let t = doc.raw_text.trim();
            if t.is_empty() {
                return Err(CorpusError::NoSegments { doc_id: doc.doc_id.clone() });
            }
            vec![t.to_string()]
        }
        SegmentationMode::Paragraph => {
            let paragraphs = split_paragraphs(&doc.raw_text);
            if paragraphs.is_empty() {
                return Err(CorpusError::NoSegments { doc_id: doc.doc_id.clone() });
            }
            let merged = merge_short(paragraphs, policy.min_chars);
            merged
                .into_iter()
                .flat_map(|p| split_oversize(p, policy.max_chars))
                .collect()
        }
    };
    if texts.is_empty() {
        return Err(CorpusError::NoSegments { doc_id: doc.doc_id.clone() });
    }
    Ok(texts
        .into_iter()
        .enumerate()
        .map(|(position, text)| Segment {
            segment_id: format!("{}:{}", doc.doc_id, position),
            doc_id: doc.doc_id.clone(),
            position,
            text,
        })
        .collect())
}

fn split_paragraphs(raw: &str) -> Vec<String> {
    let mut paragraphs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in raw.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                paragraphs.push(current.join("\n").trim().to_string());
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        paragraphs.push(current.join("\n").trim().to_string());
    }
    paragraphs.retain(|p| !p.is_empty());
    paragraphs
}

/// Merge-forward rule: a fragment below `min_chars` is prepended to the next
/// paragraph; a short final fragment is appended to its predecessor. A
/// document consisting only of short fragments collapses to one segment.
fn merge_short(paragraphs: Vec<String>, min_chars: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut pending: Option<String> = None;
    for para in paragraphs {
        let combined = match pending.take() {
            Some(prev) => format!("{prev}\n\n{para}"),
            None => para,
        };
        if combined.chars().count() < min_chars {
            pending = Some(combined);
        } else {
            out.push(combined);
        }
    }
    if let Some(rest) = pending {
        match out.last_mut() {
            Some(last) => {
                last.push_str("\n\n");
                last.push_str(&rest);
            }
            None => out.push(rest),
        }
    }
    out
}

fn split_oversize(text: String, max_chars: usize) -> Vec<String> {
    if text.chars().count() <= max_chars {
        return vec![text];
    }
    let sentences = split_sentences(&text);
    let mut chunks = Vec::new();
    let mut current = String::new();
    for sentence in sentences {
        let candidate_len = if current.is_empty() {
            sentence.chars().count()
        } else {
            current.chars().count() + 1 + sentence.chars().count()
        };
        if !current.is_empty() && candidate_len > max_chars {
            chunks.push(std::mem::take(&mut current));
        }
        if current.is_empty() {
            current = sentence.to_string();
        } else {
            current.push(' ');
            current.push_str(sentence);
        }
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks
}

/// Sentence boundaries: `.`, `!`, or `?` followed by whitespace. Keeps the
/// punctuation with the preceding sentence.
fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if (b == b'.' || b == b'!' || b == b'?')
            && bytes.get(i + 1).map(|c| c.is_ascii_whitespace()).unwrap_or(false)
        {
            let sentence = text[start..=i].trim();
            if !sentence.is_empty() {
                out.push(sentence);
            }
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            start = i;
        } else {
            i += 1;
        }
    }
    if start < text.len() {
        let tail = text[start..].trim();
        if !tail.is_empty() {
            out.push(tail);
        }
    }
    out
}
