//! `induct report`: summarize a finished run — theme distribution,
//! irrelevance rate, and the iteration trajectory — as `report.json` plus a
//! printed table. Token totals are printed from the manifest but kept out of
//! the artifact so reruns and resumed runs stay byte-identical.

use induct_core::hierarchy::{theme_distribution, DistributionRow, HierarchyRun, StopReason};
use induct_core::jsonl;
use serde::Serialize;

use super::{emit, load_annotations, CmdResult, CommandContext, OutputFormat, StageRun};

#[derive(Serialize)]
struct ReportFile {
    theme_distribution: Vec<DistributionRow>,
    irrelevance: Irrelevance,
    iteration_theme_counts: Vec<usize>,
    stop_reason: StopReason,
}

#[derive(Serialize)]
struct Irrelevance {
    irrelevant: usize,
    failed: usize,
    total: usize,
    rate: f64,
}

pub fn run(ctx: &CommandContext) -> CmdResult<()> {
    let stage = StageRun::begin(ctx, "report", &["generate", "cluster"])?;
    let annotations = load_annotations(stage.run_dir())?;
    let hierarchy: HierarchyRun = jsonl::read_json(&stage.run_dir().path("hierarchy.json"))?;

    let irrelevant = annotations.iter().filter(|a| a.irrelevant).count();
    let failed = annotations.iter().filter(|a| a.failed).count();
    let total = annotations.len();
    let report = ReportFile {
        theme_distribution: theme_distribution(&hierarchy),
        irrelevance: Irrelevance {
            irrelevant,
            failed,
            total,
            rate: irrelevant as f64 / total as f64,
        },
        iteration_theme_counts: hierarchy.iterations.iter().map(|i| i.len()).collect(),
        stop_reason: hierarchy.stop_reason,
    };
    jsonl::write_json_pretty(&stage.run_dir().path("report.json"), &report)?;

    // Token accounting comes from the manifest (operational, attempt-
    // dependent) and is deliberately not part of report.json.
    let (mut calls, mut prompt, mut completion) = (0u64, 0u64, 0u64);
    for record in stage.manifest().stages.values() {
        calls += record.upstream_calls;
        prompt += record.prompt_tokens;
        completion += record.completion_tokens;
    }

    if ctx.format == OutputFormat::Text {
        println!("theme distribution (labels / segments):");
        for row in &report.theme_distribution {
            println!(
                "  {:<28} {:>6} {:>6}  [{}]",
                truncate(&row.phrase, 28),
                row.label_count,
                row.segment_support,
                row.theme_id
            );
        }
    }
    let distribution_json: serde_json::Value = serde_json::to_value(&report.theme_distribution)
        .expect("distribution serializes");
    let iterations_json = serde_json::json!(report.iteration_theme_counts);
    let mut fields: Vec<(&str, serde_json::Value)> = vec![
        ("segments", total.into()),
        ("irrelevant", irrelevant.into()),
        ("failed", failed.into()),
        ("irrelevance_rate", format!("{:.4}", report.irrelevance.rate).into()),
        ("iteration_theme_counts", iterations_json),
        ("stop_reason", serde_json::json!(report.stop_reason)),
        ("upstream_calls", calls.into()),
        ("prompt_tokens", prompt.into()),
        ("completion_tokens", completion.into()),
    ];
    if ctx.format == OutputFormat::Json {
        fields.push(("theme_distribution", distribution_json));
    }
    stage.finish(&["report.json"], &[])?;
    emit(ctx.format, "report", &fields);
    Ok(())
}

fn truncate(s: &str, width: usize) -> String {
    if s.chars().count() <= width {
        s.to_string()
    } else {
        let cut: String = s.chars().take(width.saturating_sub(1)).collect();
        format!("{cut}…")
    }
}
