//! `induct evaluate`: score predicted themes and assignments against gold
//! annotations over the whole k grid, writing `metrics.json` and
//! `heatmap.csv`. Undefined segment-level metrics are surfaced with their
//! reasons; they do not fail the command.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use induct_core::assignment::ThemeAssignment;
use induct_core::jsonl;
use induct_core::metrics::{
    export_heatmap, load_gold, match_themes, segment_level_precision, segment_level_recall,
    similarity_matrix, theme_level_scores, MatchedPair, SegmentMetric, ThemeSet, ThemeSetKind,
};
use num_traits::ToPrimitive;
use serde::Serialize;

use super::{build_gateway, emit, load_themes, CmdError, CmdResult, CommandContext, StageRun};

#[derive(Serialize)]
struct MetricsFile {
    k_grid: Vec<f64>,
    gold_themes: usize,
    predicted_themes: usize,
    assigned_segments: usize,
    unresolved_segments: usize,
    per_k: Vec<KBlock>,
}

#[derive(Serialize)]
struct KBlock {
    k: f64,
    matched_pairs: Vec<MatchedPair>,
    theme_level: ThemeLevelOut,
    segment_level: SegmentLevelOut,
}

#[derive(Serialize)]
struct ThemeLevelOut {
    precision: f64,
    recall: f64,
}

#[derive(Serialize)]
struct SegmentLevelOut {
    precision: MetricOut,
    recall: MetricOut,
}

#[derive(Serialize)]
struct MetricOut {
    value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    undefined_reason: Option<String>,
    per_theme: Vec<PerThemeOut>,
}

#[derive(Serialize)]
struct PerThemeOut {
    theme_id: String,
    segment_count: usize,
    weight: f64,
    score: Option<f64>,
}

impl From<&SegmentMetric> for MetricOut {
    fn from(metric: &SegmentMetric) -> Self {
        Self {
            value: metric.value_f64(),
            undefined_reason: metric.undefined_reason.clone(),
            per_theme: metric
                .per_theme
                .iter()
                .map(|row| PerThemeOut {
                    theme_id: row.theme_id.clone(),
                    segment_count: row.segment_count,
                    weight: row.weight.to_f64().expect("small ratio"),
                    score: row.score.as_ref().map(|s| s.to_f64().expect("small ratio")),
                })
                .collect(),
        }
    }
}

pub struct EvaluateArgs {
    pub gold: PathBuf,
    pub themes_override: Option<PathBuf>,
    pub assignments_override: Option<PathBuf>,
}

pub async fn run(ctx: &CommandContext, args: &EvaluateArgs) -> CmdResult<()> {
    let mut deps: Vec<&str> = Vec::new();
    if args.themes_override.is_none() {
        deps.push("cluster");
    }
    if args.assignments_override.is_none() {
        deps.push("assign");
    }
    let stage = StageRun::begin(ctx, "evaluate", &deps)?;
    if stage.up_to_date() {
        stage.note_up_to_date();
        return Ok(());
    }
    let config = &ctx.loaded.config;
    let gateway = build_gateway(&config.embedding.gateway)?;

    let gold = load_gold(&args.gold).map_err(CmdError::config)?;
    let gold_set =
        ThemeSet::new(ThemeSetKind::Gold, gold.themes.clone()).map_err(CmdError::config)?;

    let themes_path = args
        .themes_override
        .clone()
        .unwrap_or_else(|| stage.run_dir().path("themes.jsonl"));
    let pred_items: Vec<(String, String)> =
        load_themes(&themes_path)?.into_iter().map(|t| (t.theme_id, t.phrase)).collect();
    let pred_set =
        ThemeSet::new(ThemeSetKind::Predicted, pred_items).map_err(CmdError::config)?;

    let assignments_path = args
        .assignments_override
        .clone()
        .unwrap_or_else(|| stage.run_dir().path("assignments.jsonl"));
    let assignment_records: Vec<ThemeAssignment> = jsonl::read_jsonl(&assignments_path)?;
    let mut assignments: BTreeMap<String, String> = BTreeMap::new();
    let mut unresolved = 0usize;
    for record in &assignment_records {
        match &record.theme_id {
            Some(theme_id) => {
                assignments.insert(record.segment_id.clone(), theme_id.clone());
            }
            None => unresolved += 1,
        }
    }
    let gold_labels: BTreeMap<String, BTreeSet<String>> = gold.segment_labels.clone();

    let matrix = similarity_matrix(&gold_set, &pred_set, &gateway, &config.embedding.model_id)
        .await
        .map_err(|e| CmdError::from(anyhow::anyhow!(e)))?;

    let mut per_k = Vec::new();
    for &k in &config.k_grid {
        let matched = match_themes(&matrix, k);
        let theme_scores = theme_level_scores(&matched, gold_set.len(), pred_set.len());
        let precision = segment_level_precision(&matched, &assignments, &gold_labels);
        let recall = segment_level_recall(&matched, &assignments, &gold_labels);
        per_k.push(KBlock {
            k,
            matched_pairs: matched.pairs.clone(),
            theme_level: ThemeLevelOut {
                precision: theme_scores.precision_f64(),
                recall: theme_scores.recall_f64(),
            },
            segment_level: SegmentLevelOut {
                precision: MetricOut::from(&precision),
                recall: MetricOut::from(&recall),
            },
        });
    }

    let file = MetricsFile {
        k_grid: config.k_grid.clone(),
        gold_themes: gold_set.len(),
        predicted_themes: pred_set.len(),
        assigned_segments: assignments.len(),
        unresolved_segments: unresolved,
        per_k,
    };
    jsonl::write_json_pretty(&stage.run_dir().path("metrics.json"), &file)?;
    export_heatmap(&matrix, &stage.run_dir().path("heatmap.csv"))
        .map_err(|e| CmdError::from(anyhow::anyhow!(e)))?;

    let mut fields: Vec<(&str, serde_json::Value)> = vec![
        ("gold_themes", file.gold_themes.into()),
        ("predicted_themes", file.predicted_themes.into()),
    ];
    let summaries: Vec<String> = file
        .per_k
        .iter()
        .map(|block| {
            let seg = |m: &MetricOut| match m.value {
                Some(v) => format!("{v:.3}"),
                None => "undefined".to_string(),
            };
            format!(
                "k={}: theme P={:.3} R={:.3}; segment P={} R={}",
                block.k,
                block.theme_level.precision,
                block.theme_level.recall,
                seg(&block.segment_level.precision),
                seg(&block.segment_level.recall),
            )
        })
        .collect();
    fields.push(("scores", serde_json::json!(summaries)));
    stage.finish(&["metrics.json", "heatmap.csv"], &[gateway.stats()])?;
    emit(ctx.format, "evaluate", &fields);
    Ok(())
}
