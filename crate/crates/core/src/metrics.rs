//! Evaluation metrics: embedding-similarity theme matching at threshold k,
//! theme-level precision/recall, and segment-level weighted precision/recall
//! over the matched sets.
//!
//! Score arithmetic is exact: set sizes and weighted sums are carried as
//! big rationals and only converted to floats at the artifact boundary, so
//! results are reproducible bit-for-bit and can be checked against
//! brute-force re-derivations with zero tolerance.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{cosine_similarity, Gateway, GatewayError};
use crate::jsonl;

pub const REASON_NO_MATCHED: &str = "no matched themes";
pub const REASON_NO_SEGMENTS_PRED: &str = "matched themes have no assigned segments";
pub const REASON_NO_SEGMENTS_GOLD: &str = "matched gold themes have no segments";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{kind} theme set is empty")]
    EmptyThemeSet { kind: &'static str },
    #[error("duplicate theme id `{0}`")]
    DuplicateThemeId(String),
    #[error("theme `{0}` has an empty phrase")]
    EmptyPhrase(String),
    #[error("gold file invalid:\n  {}", .0.join("\n  "))]
    GoldInvalid(Vec<String>),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] jsonl::JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThemeSetKind {
    Gold,
    Predicted,
}

/// An ordered set of themes: `(theme_id, phrase)` with unique ids and
/// non-empty phrases.
#[derive(Debug, Clone)]
pub struct ThemeSet {
    pub kind: ThemeSetKind,
    pub items: Vec<(String, String)>,
}

impl ThemeSet {
    pub fn new(kind: ThemeSetKind, items: Vec<(String, String)>) -> Result<Self, MetricsError> {
        if items.is_empty() {
            let name = match kind {
                ThemeSetKind::Gold => "gold",
                ThemeSetKind::Predicted => "predicted",
            };
            return Err(MetricsError::EmptyThemeSet { kind: name });
        }
        let mut seen = BTreeSet::new();
        for (id, phrase) in &items {
            if !seen.insert(id.clone()) {
                return Err(MetricsError::DuplicateThemeId(id.clone()));
            }
            if phrase.trim().is_empty() {
                return Err(MetricsError::EmptyPhrase(id.clone()));
            }
        }
        Ok(Self { kind, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Pairwise cosine similarities, gold themes as rows and predicted themes as
/// columns, in input order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub gold: Vec<(String, String)>,
    pub pred: Vec<(String, String)>,
    pub values: Vec<Vec<f64>>,
}

/// Embed both phrase lists and fill the matrix.
pub async fn similarity_matrix(
    gold: &ThemeSet,
    pred: &ThemeSet,
    gateway: &Gateway,
    embedding_model: &str,
) -> Result<SimilarityMatrix, MetricsError> {
    let mut texts: Vec<String> = Vec::with_capacity(gold.len() + pred.len());
    texts.extend(gold.items.iter().map(|(_, p)| p.clone()));
    texts.extend(pred.items.iter().map(|(_, p)| p.clone()));
    let vectors = gateway.embed_batch(embedding_model, &texts).await?;
    let (gold_vecs, pred_vecs) = vectors.split_at(gold.len());
    let mut values = Vec::with_capacity(gold.len());
    for gv in gold_vecs {
        let mut row = Vec::with_capacity(pred.len());
        for pv in pred_vecs {
            row.push(cosine_similarity(gv, pv)?);
        }
        values.push(row);
    }
    Ok(SimilarityMatrix {
        gold: gold.items.clone(),
        pred: pred.items.clone(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub gold_id: String,
    pub pred_id: String,
    pub similarity: f64,
}

/// Matched sets at threshold `k`: all pairs with similarity strictly above
/// `k`, many-to-many with no exclusivity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchResult {
    pub k: f64,
    pub pairs: Vec<MatchedPair>,
    pub gold_matched: BTreeSet<String>,
    pub pred_matched: BTreeSet<String>,
}

/// Select every pair `(g, t)` whose similarity exceeds `k` (strict).
/// Expects `k` in `(0, 1)`.
pub fn match_themes(matrix: &SimilarityMatrix, k: f64) -> MatchResult {
    debug_assert!(k > 0.0 && k < 1.0, "threshold k must lie in (0,1)");
    let mut pairs = Vec::new();
    let mut gold_matched = BTreeSet::new();
    let mut pred_matched = BTreeSet::new();
    for (i, (gold_id, _)) in matrix.gold.iter().enumerate() {
        for (j, (pred_id, _)) in matrix.pred.iter().enumerate() {
            let similarity = matrix.values[i][j];
            if similarity > k {
                pairs.push(MatchedPair {
                    gold_id: gold_id.clone(),
                    pred_id: pred_id.clone(),
                    similarity,
                });
                gold_matched.insert(gold_id.clone());
                pred_matched.insert(pred_id.clone());
            }
        }
    }
    MatchResult { k, pairs, gold_matched, pred_matched }
}

fn ratio(numerator: usize, denominator: usize) -> BigRational {
    BigRational::new(BigInt::from(numerator), BigInt::from(denominator))
}

/// Exact theme-level scores: precision `|T_match|/|T|`, recall
/// `|G_match|/|G|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThemeLevelScores {
    pub precision: BigRational,
    pub recall: BigRational,
    pub k: f64,
}

impl ThemeLevelScores {
    pub fn precision_f64(&self) -> f64 {
        self.precision.to_f64().expect("ratio of machine-sized counts")
    }

    pub fn recall_f64(&self) -> f64 {
        self.recall.to_f64().expect("ratio of machine-sized counts")
    }
}

pub fn theme_level_scores(
    matched: &MatchResult,
    gold_count: usize,
    pred_count: usize,
) -> ThemeLevelScores {
    assert!(gold_count >= 1 && pred_count >= 1, "theme sets are non-empty");
    ThemeLevelScores {
        precision: ratio(matched.pred_matched.len(), pred_count),
        recall: ratio(matched.gold_matched.len(), gold_count),
        k: matched.k,
    }
}

/// Per-theme row of a segment-level breakdown. Themes with no segments get
/// weight zero and no score.
#[derive(Debug, Clone, PartialEq)]
pub struct PerThemeRow {
    pub theme_id: String,
    pub segment_count: usize,
    pub weight: BigRational,
    pub score: Option<BigRational>,
}

/// A weighted segment-level metric; `value` is `None` when the metric is
/// undefined, with the reason recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMetric {
    pub value: Option<BigRational>,
    pub undefined_reason: Option<String>,
    pub per_theme: Vec<PerThemeRow>,
}

impl SegmentMetric {
    fn undefined(reason: &str) -> Self {
        Self { value: None, undefined_reason: Some(reason.to_string()), per_theme: Vec::new() }
    }

    pub fn value_f64(&self) -> Option<f64> {
        self.value.as_ref().map(|v| v.to_f64().expect("ratio of machine-sized counts"))
    }
}

/// Segment-level precision over matched predicted themes.
///
/// For each `t` in `T_match`, `S_t` is the set of segments assigned `t`;
/// a segment counts as matched when it carries any gold theme matched to
/// `t`. Per-theme precisions are weighted by `|S_t| / Σ|S_t|` over matched
/// themes with at least one segment; matched themes with none appear in the
/// breakdown with weight zero.
pub fn segment_level_precision(
    matched: &MatchResult,
    assignments: &BTreeMap<String, String>,
    gold_labels: &BTreeMap<String, BTreeSet<String>>,
) -> SegmentMetric {
    if matched.pred_matched.is_empty() {
        return SegmentMetric::undefined(REASON_NO_MATCHED);
    }
    let mut golds_for_pred: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for pair in &matched.pairs {
        golds_for_pred
            .entry(pair.pred_id.as_str())
            .or_default()
            .insert(pair.gold_id.as_str());
    }

    let mut rows: Vec<(String, usize, usize)> = Vec::new(); // (theme, |S_t|, |S_t^matched|)
    for pred_id in &matched.pred_matched {
        let matched_golds = &golds_for_pred[pred_id.as_str()];
        let mut size = 0usize;
        let mut hit = 0usize;
        for (segment_id, assigned) in assignments {
            if assigned != pred_id {
                continue;
            }
            size += 1;
            let carries_matched_gold = gold_labels
                .get(segment_id)
                .map(|golds| golds.iter().any(|g| matched_golds.contains(g.as_str())))
                .unwrap_or(false);
            if carries_matched_gold {
                hit += 1;
            }
        }
        rows.push((pred_id.clone(), size, hit));
    }

    let total: usize = rows.iter().map(|(_, size, _)| size).sum();
    if total == 0 {
        let mut metric = SegmentMetric::undefined(REASON_NO_SEGMENTS_PRED);
        metric.per_theme = rows
            .into_iter()
            .map(|(theme_id, segment_count, _)| PerThemeRow {
                theme_id,
                segment_count,
                weight: BigRational::zero(),
                score: None,
            })
            .collect();
        return metric;
    }

    let mut value = BigRational::zero();
    let per_theme = rows
        .into_iter()
        .map(|(theme_id, segment_count, hit)| {
            let (weight, score) = if segment_count > 0 {
                let weight = ratio(segment_count, total);
                let score = ratio(hit, segment_count);
                value += &weight * &score;
                (weight, Some(score))
            } else {
                (BigRational::zero(), None)
            };
            PerThemeRow { theme_id, segment_count, weight, score }
        })
        .collect();
    SegmentMetric { value: Some(value), undefined_reason: None, per_theme }
}

/// Segment-level recall over matched gold themes, symmetric to precision:
/// `S_g` comes from the gold labels, and a segment counts as matched when it
/// is assigned any predicted theme matched to `g`.
pub fn segment_level_recall(
    matched: &MatchResult,
    assignments: &BTreeMap<String, String>,
    gold_labels: &BTreeMap<String, BTreeSet<String>>,
) -> SegmentMetric {
    if matched.gold_matched.is_empty() {
        return SegmentMetric::undefined(REASON_NO_MATCHED);
    }
    let mut preds_for_gold: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for pair in &matched.pairs {
        preds_for_gold
            .entry(pair.gold_id.as_str())
            .or_default()
            .insert(pair.pred_id.as_str());
    }

    let mut rows: Vec<(String, usize, usize)> = Vec::new();
    for gold_id in &matched.gold_matched {
        let matched_preds = &preds_for_gold[gold_id.as_str()];
        let mut size = 0usize;
        let mut hit = 0usize;
        for (segment_id, golds) in gold_labels {
            if !golds.contains(gold_id) {
                continue;
            }
            size += 1;
            let assigned_matched_pred = assignments
                .get(segment_id)
                .map(|assigned| matched_preds.contains(assigned.as_str()))
                .unwrap_or(false);
            if assigned_matched_pred {
                hit += 1;
            }
        }
        rows.push((gold_id.clone(), size, hit));
    }

    let total: usize = rows.iter().map(|(_, size, _)| size).sum();
    if total == 0 {
        let mut metric = SegmentMetric::undefined(REASON_NO_SEGMENTS_GOLD);
        metric.per_theme = rows
            .into_iter()
            .map(|(theme_id, segment_count, _)| PerThemeRow {
                theme_id,
                segment_count,
                weight: BigRational::zero(),
                score: None,
            })
            .collect();
        return metric;
    }

    let mut value = BigRational::zero();
    let per_theme = rows
        .into_iter()
        .map(|(theme_id, segment_count, hit)| {
            let (weight, score) = if segment_count > 0 {
                let weight = ratio(segment_count, total);
                let score = ratio(hit, segment_count);
                value += &weight * &score;
                (weight, Some(score))
            } else {
                (BigRational::zero(), None)
            };
            PerThemeRow { theme_id, segment_count, weight, score }
        })
        .collect();
    SegmentMetric { value: Some(value), undefined_reason: None, per_theme }
}

/// Write the similarity matrix as CSV: gold phrases as rows, predicted
/// phrases as columns, values to two decimals. Re-exports are byte-identical.
pub fn export_heatmap(matrix: &SimilarityMatrix, path: &Path) -> Result<(), MetricsError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec![String::new()];
    header.extend(matrix.pred.iter().map(|(_, phrase)| phrase.clone()));
    writer.write_record(&header).map_err(csv_err)?;
    for (i, (_, gold_phrase)) in matrix.gold.iter().enumerate() {
        let mut row = vec![gold_phrase.clone()];
        row.extend(matrix.values[i].iter().map(|v| format!("{v:.2}")));
        writer.write_record(&row).map_err(csv_err)?;
    }
    let bytes = writer.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
    jsonl::atomic_write(path, &bytes)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> MetricsError {
    MetricsError::GoldInvalid(vec![format!("csv write: {e}")])
}

/// Gold annotations: the theme inventory plus (multi-label) per-segment
/// theme ids.
#[derive(Debug, Clone, Default)]
pub struct GoldStandard {
    pub themes: Vec<(String, String)>,
    pub segment_labels: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GoldRecord {
    Theme { id: String, phrase: String },
    SegmentLabels { segment_id: String, themes: Vec<String> },
}

/// Load and validate `gold.jsonl`. All schema violations are enumerated in
/// one error (line numbers included) rather than failing on the first.
pub fn load_gold(path: &Path) -> Result<GoldStandard, MetricsError> {
    let content = std::fs::read_to_string(path).map_err(|e| {
        MetricsError::GoldInvalid(vec![format!("cannot read {}: {e}", path.display())])
    })?;
    let mut gold = GoldStandard::default();
    let mut violations: Vec<String> = Vec::new();
    let mut theme_ids: BTreeSet<String> = BTreeSet::new();
    let mut pending_segments: Vec<(usize, String, Vec<String>)> = Vec::new();

    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<GoldRecord>(line) {
            Ok(GoldRecord::Theme { id, phrase }) => {
                if phrase.trim().is_empty() {
                    violations.push(format!("line {line_no}: theme `{id}` has empty phrase"));
                } else if !theme_ids.insert(id.clone()) {
                    violations.push(format!("line {line_no}: duplicate theme id `{id}`"));
                } else {
                    gold.themes.push((id, phrase));
                }
            }
            Ok(GoldRecord::SegmentLabels { segment_id, themes }) => {
                pending_segments.push((line_no, segment_id, themes));
            }
            Err(e) => violations.push(format!("line {line_no}: {e}")),
        }
    }
    for (line_no, segment_id, themes) in pending_segments {
        if gold.segment_labels.contains_key(&segment_id) {
            violations
                .push(format!("line {line_no}: duplicate segment_labels for `{segment_id}`"));
            continue;
        }
        let mut refs = BTreeSet::new();
        for theme in themes {
            if theme_ids.contains(&theme) {
                refs.insert(theme);
            } else {
                violations.push(format!(
                    "line {line_no}: segment `{segment_id}` references unknown theme `{theme}`"
                ));
            }
        }
        gold.segment_labels.insert(segment_id, refs);
    }
    if gold.themes.is_empty() {
        violations.push("no theme records found".to_string());
    }
    if violations.is_empty() {
        Ok(gold)
    } else {
        Err(MetricsError::GoldInvalid(violations))
    }
}
