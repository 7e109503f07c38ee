//! Stage orchestration shared by every subcommand: run-directory locking,
//! manifest bookkeeping, dependency ordering, config-hash checks, and
//! text/JSON summaries.

pub mod assign;
pub mod cluster;
pub mod evaluate;
pub mod generate;
pub mod incremental;
pub mod ingest;
pub mod report;
pub mod trace;

use anyhow::anyhow;
use induct_core::corpus::Segment;
use induct_core::gateway::{Gateway, GatewayConfig, GatewayStats};
use induct_core::hierarchy::Theme;
use induct_core::jsonl;
use induct_core::labeling::{AnnotationRecord, SegmentAnnotation};

use crate::config::LoadedConfig;
use crate::manifest::{accumulate_stats, LockGuard, Manifest, RunDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
}

/// Error classes map onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    General,
    Config,
    EmptyInput,
    Ordering,
}

impl ExitKind {
    pub fn code(self) -> u8 {
        match self {
            ExitKind::General => 1,
            ExitKind::Config => 2,
            ExitKind::EmptyInput => 3,
            ExitKind::Ordering => 4,
        }
    }
}

#[derive(Debug)]
pub struct CmdError {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl CmdError {
    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self { kind: ExitKind::Config, error: error.into() }
    }

    pub fn empty(message: impl Into<String>) -> Self {
        Self { kind: ExitKind::EmptyInput, error: anyhow!(message.into()) }
    }

    pub fn ordering(message: impl Into<String>) -> Self {
        Self { kind: ExitKind::Ordering, error: anyhow!(message.into()) }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CmdError {
    fn from(error: E) -> Self {
        Self { kind: ExitKind::General, error: error.into() }
    }
}

pub type CmdResult<T> = Result<T, CmdError>;

pub struct CommandContext {
    pub loaded: LoadedConfig,
    pub force: bool,
    pub format: OutputFormat,
}

/// Guard for one stage execution: holds the lock, validates ordering and
/// config hash, and writes the manifest record on `finish`.
pub struct StageRun {
    run_dir: RunDir,
    _lock: LockGuard,
    manifest: Manifest,
    stage: &'static str,
    up_to_date: bool,
}

impl StageRun {
    pub fn begin(
        ctx: &CommandContext,
        stage: &'static str,
        deps: &[&str],
    ) -> CmdResult<StageRun> {
        let run_dir = RunDir::open(&ctx.loaded.run_dir)?;
        let lock = run_dir.lock()?;
        let manifest = match run_dir.load_manifest()? {
            Some(m) if m.config_hash != ctx.loaded.hash => {
                if !ctx.force {
                    return Err(CmdError::config(anyhow!(
                        "config has changed since this run directory was created \
                         (manifest hash {}..., config hash {}...); rerun with --force to \
                         archive existing artifacts and restart",
                        &m.config_hash[..12.min(m.config_hash.len())],
                        &ctx.loaded.hash[..12]
                    )));
                }
                if let Some(dir) = run_dir.archive_artifacts()? {
                    eprintln!("archived previous artifacts to {}", dir.display());
                }
                Manifest::new(&ctx.loaded.hash)
            }
            Some(m) => m,
            None => Manifest::new(&ctx.loaded.hash),
        };
        run_dir.save_manifest(&manifest)?;

        for dep in deps {
            if !manifest.stage_complete(dep) {
                return Err(CmdError::ordering(format!(
                    "stage `{stage}` requires `{dep}` to be complete first; run `induct {dep}`"
                )));
            }
        }

        let artifacts_present = manifest
            .stage(stage)
            .map(|record| record.artifacts.keys().all(|name| run_dir.path(name).exists()))
            .unwrap_or(false);
        let up_to_date = manifest.stage_complete(stage) && artifacts_present && !ctx.force;

        Ok(StageRun { run_dir, _lock: lock, manifest, stage, up_to_date })
    }

    pub fn up_to_date(&self) -> bool {
        self.up_to_date
    }

    pub fn run_dir(&self) -> &RunDir {
        &self.run_dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn note_up_to_date(&self) {
        println!("{}: up to date", self.stage);
    }

    /// Record completion: checksums for the named artifacts, cumulative
    /// gateway counters, and the completion flag.
    pub fn finish(mut self, artifacts: &[&str], stats: &[GatewayStats]) -> CmdResult<()> {
        let mut record = self.manifest.stages.remove(self.stage).unwrap_or_default();
        record.complete = true;
        record.finished_unix = crate::manifest::now_unix();
        record.artifacts.clear();
        for name in artifacts {
            record.artifacts.insert(name.to_string(), self.run_dir.checksum(name)?);
        }
        for s in stats {
            accumulate_stats(&mut record, s);
        }
        self.manifest.stages.insert(self.stage.to_string(), record);
        self.run_dir.save_manifest(&self.manifest)?;
        Ok(())
    }
}

/// Print a command summary as `key: value` lines or as one JSON object.
pub fn emit(format: OutputFormat, command: &str, fields: &[(&str, serde_json::Value)]) {
    match format {
        OutputFormat::Text => {
            for (key, value) in fields {
                match value {
                    serde_json::Value::String(s) => println!("{key}: {s}"),
                    other => println!("{key}: {other}"),
                }
            }
        }
        OutputFormat::Json => {
            let mut object = serde_json::Map::new();
            object.insert("command".into(), serde_json::Value::String(command.into()));
            for (key, value) in fields {
                object.insert((*key).to_string(), value.clone());
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::Value::Object(object))
                    .expect("summary serializes")
            );
        }
    }
}

pub fn build_gateway(cfg: &GatewayConfig) -> CmdResult<Gateway> {
    Gateway::from_config(cfg).map_err(CmdError::config)
}

pub fn load_segments(run_dir: &RunDir) -> CmdResult<Vec<Segment>> {
    let segments: Vec<Segment> = jsonl::read_jsonl(&run_dir.path("segments.jsonl"))?;
    Ok(segments)
}

pub fn load_annotations(run_dir: &RunDir) -> CmdResult<Vec<SegmentAnnotation>> {
    let records: Vec<AnnotationRecord> = jsonl::read_jsonl(&run_dir.path("annotations.jsonl"))?;
    Ok(records.into_iter().map(SegmentAnnotation::from).collect())
}

pub fn load_themes(path: &std::path::Path) -> CmdResult<Vec<Theme>> {
    let themes: Vec<Theme> = jsonl::read_jsonl(path)?;
    Ok(themes)
}
