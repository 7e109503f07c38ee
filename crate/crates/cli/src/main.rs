//! `induct` — LLM-driven inductive coding of text corpora: segment, label,
//! cluster into themes with lineage, reassign, and evaluate against gold
//! annotations, all inside a resumable run directory.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CommandContext, OutputFormat};

#[derive(Parser)]
#[command(name = "induct", version, about = "LLM-driven inductive coding of text corpora")]
struct Cli {
    /// Path to the run config (JSON).
    #[arg(long, global = true, default_value = "config.json")]
    config: PathBuf,
    /// Override the run directory named in the config.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Re-run a completed stage; with a changed config, archive prior
    /// artifacts and restart.
    #[arg(long, global = true)]
    force: bool,
    /// Output format for command summaries.
    #[arg(long, global = true, value_enum, default_value = "text")]
    format: OutputFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the corpus and write segments.jsonl.
    Ingest,
    /// Generate per-segment labels (resumable).
    Generate,
    /// Cluster the label pool into themes with full lineage.
    Cluster,
    /// Run the incremental codebook baseline.
    Incremental {
        /// Gold annotations; enables the per-label coverage stop condition.
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Assign final themes back to every segment (resumable).
    Assign,
    /// Score themes and assignments against gold annotations.
    Evaluate {
        /// Gold annotations file (gold.jsonl).
        #[arg(long)]
        gold: PathBuf,
        /// Score an external themes file instead of this run's themes.jsonl.
        #[arg(long)]
        themes: Option<PathBuf>,
        /// Score an external assignments file instead of this run's
        /// assignments.jsonl.
        #[arg(long)]
        assignments: Option<PathBuf>,
    },
    /// Print a theme's lineage subtree.
    Trace {
        theme_id: String,
        /// `full` or a positive number of levels below the theme.
        #[arg(long, default_value = "full")]
        depth: String,
    },
    /// Summarize a finished run (distribution, irrelevance rate, trajectory).
    Report,
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let loaded = match config::load_config(&cli.config, cli.run_dir.as_deref()) {
        Ok(loaded) => loaded,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(commands::ExitKind::Config.code());
        }
    };
    let ctx = CommandContext { loaded, force: cli.force, format: cli.format };

    let result = match &cli.command {
        Command::Ingest => commands::ingest::run(&ctx),
        Command::Generate => commands::generate::run(&ctx).await,
        Command::Cluster => commands::cluster::run(&ctx).await,
        Command::Incremental { gold } => commands::incremental::run(&ctx, gold.as_ref()).await,
        Command::Assign => commands::assign::run(&ctx).await,
        Command::Evaluate { gold, themes, assignments } => {
            let args = commands::evaluate::EvaluateArgs {
                gold: gold.clone(),
                themes_override: themes.clone(),
                assignments_override: assignments.clone(),
            };
            commands::evaluate::run(&ctx, &args).await
        }
        Command::Trace { theme_id, depth } => commands::trace::run(&ctx, theme_id, depth),
        Command::Report => commands::report::run(&ctx),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.kind.code())
        }
    }
}
