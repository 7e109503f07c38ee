//! `induct incremental`: run the sample/merge/drop codebook baseline. The
//! final codebook is also emitted in the `themes.jsonl` shape so the
//! evaluation stage consumes either pipeline's output uniformly.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use induct_core::hierarchy::Theme;
use induct_core::incremental::{run_incremental, IncrementalPipelines};
use induct_core::jsonl;
use induct_core::metrics::load_gold;

use super::{build_gateway, emit, load_segments, CmdError, CmdResult, CommandContext, StageRun};

pub async fn run(ctx: &CommandContext, gold: Option<&PathBuf>) -> CmdResult<()> {
    let stage = StageRun::begin(ctx, "incremental", &["ingest"])?;
    if stage.up_to_date() {
        stage.note_up_to_date();
        return Ok(());
    }
    let config = &ctx.loaded.config;
    let generation = build_gateway(&config.generation.gateway)?;
    let merge = build_gateway(&config.clustering.gateway)?;

    // Gold labels (when provided) gate the full-phase stop condition.
    let coverage: Option<BTreeMap<String, BTreeSet<String>>> = match gold {
        Some(path) => {
            let gold = load_gold(path).map_err(CmdError::config)?;
            let mut by_theme: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
            for (segment_id, themes) in &gold.segment_labels {
                for theme in themes {
                    by_theme.entry(theme.clone()).or_default().insert(segment_id.clone());
                }
            }
            Some(by_theme)
        }
        None => None,
    };

    let segments = load_segments(stage.run_dir())?;
    let run = run_incremental(
        &config.task,
        &segments,
        &config.incremental,
        &IncrementalPipelines {
            generation: &generation,
            generation_chat: &config.generation.chat_options(),
            merge: &merge,
            merge_chat: &config.clustering.chat_options(),
        },
        coverage.as_ref(),
    )
    .await?;

    jsonl::write_json_pretty(&stage.run_dir().path("incremental_run.json"), &run)?;
    let themes: Vec<Theme> = run
        .final_codebook
        .iter()
        .enumerate()
        .map(|(i, entry)| Theme {
            theme_id: format!("c{i}"),
            phrase: entry.code.clone(),
            level: 1,
            children: Vec::new(),
            segment_support: entry.segment_ids.len(),
        })
        .collect();
    jsonl::write_jsonl(&stage.run_dir().path("incremental_themes.jsonl"), &themes)?;

    let sample_sizes: Vec<usize> =
        run.iterations.iter().map(|i| i.sampled_segment_ids.len()).collect();
    let stats = [generation.stats(), merge.stats()];
    stage.finish(&["incremental_run.json", "incremental_themes.jsonl"], &stats)?;
    emit(
        ctx.format,
        "incremental",
        &[
            ("iterations", run.iterations.len().into()),
            ("sample_sizes", serde_json::json!(sample_sizes)),
            ("final_codes", run.final_codebook.len().into()),
            ("dropped_codes", run.dropped.len().into()),
            ("full_phase_end", run.full_phase_end.clone().into()),
            ("stop_reason", run.stop_reason.clone().into()),
        ],
    );
    Ok(())
}
