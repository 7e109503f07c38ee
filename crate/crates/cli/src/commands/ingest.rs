//! `induct ingest`: load the corpus and write `segments.jsonl`.

use induct_core::corpus::{load_corpus, segment_document, CorpusError, Segment};
use induct_core::jsonl;

use super::{emit, CmdError, CmdResult, CommandContext, StageRun};

pub fn run(ctx: &CommandContext) -> CmdResult<()> {
    let stage = StageRun::begin(ctx, "ingest", &[])?;
    if stage.up_to_date() {
        stage.note_up_to_date();
        return Ok(());
    }
    let config = &ctx.loaded.config;

    let documents = load_corpus(&config.corpus.path, config.corpus.format).map_err(|e| match e {
        CorpusError::Record { .. }
        | CorpusError::DuplicateId { .. }
        | CorpusError::EmptyDocument { .. } => CmdError::config(e),
        other => CmdError::from(other),
    })?;
    if documents.is_empty() {
        return Err(CmdError::empty("corpus contains no documents"));
    }

    let mut segments: Vec<Segment> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    for doc in &documents {
        match segment_document(doc, &config.segmentation) {
            Ok(mut segs) => segments.append(&mut segs),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        for failure in &failures {
            eprintln!("validation failure: {failure}");
        }
        return Err(CmdError::config(anyhow::anyhow!(
            "{} of {} documents failed validation",
            failures.len(),
            documents.len()
        )));
    }

    jsonl::write_jsonl(&stage.run_dir().path("segments.jsonl"), &segments)?;
    let (documents_n, segments_n) = (documents.len(), segments.len());
    stage.finish(&["segments.jsonl"], &[])?;
    emit(
        ctx.format,
        "ingest",
        &[
            ("documents", documents_n.into()),
            ("segments", segments_n.into()),
        ],
    );
    Ok(())
}
