//! `induct cluster`: cluster the label pool into themes, writing the full
//! lineage record (`hierarchy.json`) and the final themes (`themes.jsonl`).

use induct_core::hierarchy::run_hierarchical_clustering;
use induct_core::jsonl;
use induct_core::labeling::label_pool;

use super::{build_gateway, emit, load_annotations, CmdError, CmdResult, CommandContext, StageRun};

pub async fn run(ctx: &CommandContext) -> CmdResult<()> {
    let stage = StageRun::begin(ctx, "cluster", &["generate"])?;
    if stage.up_to_date() {
        stage.note_up_to_date();
        return Ok(());
    }
    let config = &ctx.loaded.config;
    let gateway = build_gateway(&config.clustering.gateway)?;

    let annotations = load_annotations(stage.run_dir())?;
    let pool = label_pool(&annotations);
    if pool.is_empty() {
        return Err(CmdError::empty(
            "nothing to cluster: the label pool is empty (all segments irrelevant or failed)",
        ));
    }

    let run = run_hierarchical_clustering(
        &pool,
        &config.task.coding_goal,
        &config.cluster,
        &gateway,
        &config.clustering.chat_options(),
    )
    .await?;

    jsonl::write_json_pretty(&stage.run_dir().path("hierarchy.json"), &run)?;
    jsonl::write_jsonl(&stage.run_dir().path("themes.jsonl"), &run.final_themes)?;

    let counts: Vec<usize> = run.iterations.iter().map(|i| i.len()).collect();
    let stats = gateway.stats();
    stage.finish(&["hierarchy.json", "themes.jsonl"], &[stats])?;
    emit(
        ctx.format,
        "cluster",
        &[
            ("pool_labels", pool.len().into()),
            ("iteration_theme_counts", serde_json::json!(counts)),
            ("final_themes", run.final_themes.len().into()),
            ("stop_reason", serde_json::json!(run.stop_reason)),
            ("upstream_calls", stats.upstream_calls.into()),
        ],
    );
    Ok(())
}
