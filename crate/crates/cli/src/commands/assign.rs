//! `induct assign`: attach one final theme to every segment, resumably,
//! writing `assignments.jsonl`.

use induct_core::assignment::{
    assign_all, AssignOptions, AssignmentPipelines, FuzzyMatcher, Resolution,
};
use induct_core::jsonl;

use super::{build_gateway, emit, load_segments, load_themes, CmdResult, CommandContext, StageRun};

const CHECKPOINT: &str = "assignments.jsonl.ckpt";

pub async fn run(ctx: &CommandContext) -> CmdResult<()> {
    let stage = StageRun::begin(ctx, "assign", &["ingest", "cluster"])?;
    if stage.up_to_date() {
        stage.note_up_to_date();
        return Ok(());
    }
    let config = &ctx.loaded.config;
    let chat_gateway = build_gateway(&config.generation.gateway)?;
    let embed_gateway = build_gateway(&config.embedding.gateway)?;

    let themes: Vec<(String, String)> = load_themes(&stage.run_dir().path("themes.jsonl"))?
        .into_iter()
        .map(|t| (t.theme_id, t.phrase))
        .collect();
    let segments = load_segments(stage.run_dir())?;

    let fuzzy = FuzzyMatcher {
        model_id: config.embedding.model_id.clone(),
        threshold: config.assignment.fuzzy_threshold,
    };
    let chat_options = config.generation.chat_options();
    let assignments = assign_all(
        &config.task.coding_goal,
        &themes,
        &segments,
        &AssignmentPipelines {
            chat: &chat_gateway,
            chat_options: &chat_options,
            embeddings: &embed_gateway,
            fuzzy: &fuzzy,
        },
        &AssignOptions { checkpoint: Some(stage.run_dir().path(CHECKPOINT)) },
    )
    .await?;

    jsonl::write_jsonl(&stage.run_dir().path("assignments.jsonl"), &assignments)?;
    let _ = std::fs::remove_file(stage.run_dir().path(CHECKPOINT));

    let unresolved =
        assignments.iter().filter(|a| a.resolution == Resolution::Unresolved).count();
    let fuzzy_n = assignments.iter().filter(|a| a.resolution == Resolution::Fuzzy).count();
    let rate = unresolved as f64 / assignments.len() as f64;
    let stats = [chat_gateway.stats(), embed_gateway.stats()];
    stage.finish(&["assignments.jsonl"], &stats)?;
    emit(
        ctx.format,
        "assign",
        &[
            ("segments", assignments.len().into()),
            ("unresolved", unresolved.into()),
            ("fuzzy", fuzzy_n.into()),
            ("unresolved_rate", format!("{rate:.4}").into()),
        ],
    );
    Ok(())
}
