//! `induct generate`: label every segment, resumably, and write
//! `annotations.jsonl`.

use induct_core::jsonl;
use induct_core::labeling::{generate_labels, label_pool, AnnotationRecord, GenerateOptions};

use super::{build_gateway, emit, load_segments, CmdResult, CommandContext, StageRun};

const CHECKPOINT: &str = "annotations.jsonl.ckpt";

pub async fn run(ctx: &CommandContext) -> CmdResult<()> {
    let stage = StageRun::begin(ctx, "generate", &["ingest"])?;
    if stage.up_to_date() {
        stage.note_up_to_date();
        return Ok(());
    }
    let config = &ctx.loaded.config;
    // Gateway misconfiguration fails here, before any segment is touched.
    let gateway = build_gateway(&config.generation.gateway)?;

    let segments = load_segments(stage.run_dir())?;
    let annotations = generate_labels(
        &config.task,
        &segments,
        &gateway,
        &config.generation.chat_options(),
        &GenerateOptions { checkpoint: Some(stage.run_dir().path(CHECKPOINT)) },
    )
    .await?;

    let records: Vec<AnnotationRecord> = annotations.iter().map(AnnotationRecord::from).collect();
    jsonl::write_jsonl(&stage.run_dir().path("annotations.jsonl"), &records)?;
    let _ = std::fs::remove_file(stage.run_dir().path(CHECKPOINT));

    let irrelevant = annotations.iter().filter(|a| a.irrelevant).count();
    let failed = annotations.iter().filter(|a| a.failed).count();
    let distinct_labels = label_pool(&annotations).len();
    let stats = gateway.stats();
    stage.finish(&["annotations.jsonl"], &[stats])?;
    emit(
        ctx.format,
        "generate",
        &[
            ("segments", annotations.len().into()),
            ("irrelevant", irrelevant.into()),
            ("failed", failed.into()),
            ("distinct_labels", distinct_labels.into()),
            ("upstream_calls", stats.upstream_calls.into()),
            ("cache_hits", stats.cache_hits.into()),
        ],
    );
    Ok(())
}
