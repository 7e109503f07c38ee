//! `induct trace`: print a theme's lineage subtree, down to pool labels and
//! their segments at full depth.

use induct_core::hierarchy::{trace_theme, HierarchyRun, TraceDepth, TraceNode};
use induct_core::jsonl;

use super::{CmdError, CmdResult, CommandContext, OutputFormat, StageRun};

pub fn run(ctx: &CommandContext, theme_id: &str, depth: &str) -> CmdResult<()> {
    let stage = StageRun::begin(ctx, "trace", &["cluster"])?;
    let run: HierarchyRun = jsonl::read_json(&stage.run_dir().path("hierarchy.json"))?;

    let depth = parse_depth(depth)?;
    let node = trace_theme(&run, theme_id, depth)?;
    match ctx.format {
        OutputFormat::Json => {
            println!("{}", serde_json::to_string_pretty(&node).expect("trace serializes"));
        }
        OutputFormat::Text => {
            let mut out = String::new();
            render(&node, 0, &mut out);
            print!("{out}");
        }
    }
    Ok(())
}

fn parse_depth(raw: &str) -> CmdResult<TraceDepth> {
    if raw.eq_ignore_ascii_case("full") {
        return Ok(TraceDepth::Full);
    }
    match raw.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(TraceDepth::Levels(n)),
        _ => Err(CmdError::config(anyhow::anyhow!(
            "--depth must be `full` or a positive integer, got `{raw}`"
        ))),
    }
}

fn render(node: &TraceNode, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    if node.kind == "label" {
        let shown: Vec<&str> = node.segment_ids.iter().take(8).map(String::as_str).collect();
        let suffix = if node.segment_ids.len() > 8 {
            format!(", +{} more", node.segment_ids.len() - 8)
        } else {
            String::new()
        };
        out.push_str(&format!(
            "{pad}- {} (segments: {}{suffix})\n",
            node.phrase,
            shown.join(", ")
        ));
    } else {
        out.push_str(&format!(
            "{pad}{} \"{}\" level={} support={}\n",
            node.id,
            node.phrase,
            node.level.unwrap_or(0),
            node.segment_support
        ));
    }
    for child in &node.children {
        render(child, indent + 1, out);
    }
}
