//! The batch and terminal commands: `chat`, `eval` and `freq`.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, ValueEnum};
use cues_core::backend::CompletionBackend;
use cues_core::dataset::{load_dataset, write_dataset, DatasetError, GroundTruthPair};
use cues_core::parser::{serialize_annotated, AnnotatedUtterance, Severity};
use cues_core::prompt::{GenerationParams, PromptTemplate};
use cues_core::report::{
    frequency_to_csv, frequency_to_json, render_alignment_table, render_frequency_bars, report_to_csv, report_to_json,
};
use cues_core::scoring::{aggregate, build_records, frequency, side_assignments, FrequencyDistribution, Source};
use cues_core::session::{format_timestamp, start_session, Session, SessionConfig, SessionError, Turn};
use serde_json::json;

use crate::options::BackendArgs;
use crate::{failure, CliError};

#[derive(Debug, Clone, Args)]
pub struct ChatArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Ground-truth dataset (JSONL).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory for report.json, report.csv and records.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Generate robot responses with the backend instead of reading them
    /// from the dataset.
    #[arg(long)]
    pub regenerate: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Human,
    Robot,
    Both,
}

impl SourceArg {
    fn sources(self) -> &'static [Source] {
        match self {
            SourceArg::Human => &[Source::Human],
            SourceArg::Robot => &[Source::Robot],
            SourceArg::Both => &[Source::Human, Source::Robot],
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct FreqArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SourceArg::Both)]
    pub source: SourceArg,
    /// Directory for frequency.csv, frequency.json and frequency.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn dataset_failure(path: &Path, e: DatasetError) -> CliError {
    match e {
        DatasetError::Invalid(lines) => {
            let detail: Vec<String> = lines.iter().map(|l| format!("{}: {l}", path.display())).collect();
            CliError::Failure(detail.join("\n"))
        }
        other => failure(other),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| failure(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| failure(format!("{}: {e}", dir.display())))
}

fn pretty(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json value serializes");
    s.push('\n');
    s
}

fn session_failure(e: SessionError) -> CliError {
    match e {
        SessionError::Prompt(p) => CliError::Usage(p.to_string()),
        other => failure(other),
    }
}

fn describe_robot_turn(turn: &Turn) -> String {
    let mut out = match turn.annotated() {
        Some(u) => serialize_annotated(&u),
        None => turn.text.clone(),
    };
    for d in &turn.diagnostics {
        let tag = match d.severity {
            Severity::Warning => "warning",
            Severity::Info => "note",
        };
        out.push_str(&format!("\n  [{tag}] {}", d.message));
    }
    out
}

/// Interactive loop over `input`. `/save <path>` writes the transcript,
/// `/quit` (or end of input) exits.
pub fn run_chat(args: &ChatArgs, input: impl BufRead, mut out: impl Write) -> Result<(), CliError> {
    let mut config = SessionConfig::new(args.backend.template()?, args.backend.params()?, args.backend.backend()?);
    config.parser = args.backend.parser()?;
    let mut session = start_session(config).map_err(session_failure)?;
    let io = |e: std::io::Error| failure(format!("writing output: {e}"));
    writeln!(
        out,
        "session {} ({} backend); /save <path> to save, /quit to exit",
        session.id(),
        args.backend.backend.name()
    )
    .map_err(io)?;
    for line in input.lines() {
        let line = line.map_err(|e| failure(format!("reading input: {e}")))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "/quit" {
            break;
        }
        if let Some(rest) = line.strip_prefix("/save") {
            let path = rest.trim();
            if path.is_empty() {
                writeln!(out, "usage: /save <path>").map_err(io)?;
                continue;
            }
            match session.save(Path::new(path)) {
                Ok(()) => writeln!(out, "saved {} turns to {path}", session.turns().len()).map_err(io)?,
                Err(e) => writeln!(out, "save failed: {e}").map_err(io)?,
            }
            continue;
        }
        let (_, robot) = session.step(line).map_err(session_failure)?;
        writeln!(out, "{}\n", describe_robot_turn(&robot)).map_err(io)?;
    }
    Ok(())
}

/// Robot responses for every pair, each generated from a fresh session
/// with no prior history.
fn regenerate_robot(
    pairs: &mut [GroundTruthPair],
    template: &PromptTemplate,
    params: &GenerationParams,
    backend: Arc<dyn CompletionBackend>,
    args: &BackendArgs,
) -> Result<(), CliError> {
    let health = backend.health_check();
    if !health.is_ok() {
        return Err(failure(format!("backend unavailable ({:?}): {}", health.status, health.detail)));
    }
    for pair in pairs.iter_mut() {
        let mut config = SessionConfig::new(template.clone(), params.clone(), Arc::clone(&backend));
        config.parser = args.parser()?;
        config.require_healthy = false;
        let mut session: Session = start_session(config).map_err(session_failure)?;
        let (_, robot) = session.step(&pair.client_message).map_err(|e| failure(format!("pair {}: {e}", pair.id)))?;
        pair.robot = Some(AnnotatedUtterance {
            text: robot.text.clone(),
            cues: robot.cues.expect("robot turns carry cues"),
            diagnostics: robot.diagnostics.clone(),
        });
    }
    Ok(())
}

/// Scores the dataset and returns the rendered summary table.
pub fn run_eval(args: &EvalArgs) -> Result<String, CliError> {
    let mut pairs = load_dataset(&args.dataset).map_err(|e| dataset_failure(&args.dataset, e))?;
    if args.regenerate {
        let template = args.backend.template()?;
        let params = args.backend.params()?;
        let backend = args.backend.backend()?;
        regenerate_robot(&mut pairs, &template, &params, backend, &args.backend)?;
    }
    let records = build_records(&pairs).map_err(failure)?;
    let report = aggregate(&records).map_err(failure)?;
    let table = render_alignment_table(&report);

    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_file(&dir.join("report.json"), &pretty(&report_to_json(&report)))?;
        write_file(&dir.join("report.csv"), &report_to_csv(&report))?;
        let mut lines = String::new();
        for r in &records {
            lines.push_str(&serde_json::to_string(r).expect("record serializes"));
            lines.push('\n');
        }
        write_file(&dir.join("records.jsonl"), &lines)?;
        if args.regenerate {
            write_dataset(&dir.join("regenerated.jsonl"), &pairs).map_err(failure)?;
        }
        let meta = json!({
            "generated_at": format_timestamp(&chrono::Utc::now()),
            "dataset": args.dataset.display().to_string(),
            "pairs": pairs.len(),
            "regenerated": args.regenerate,
            "backend": args.regenerate.then(|| args.backend.backend.name()),
        });
        write_file(&dir.join("report.meta.json"), &pretty(&meta))?;
    }
    Ok(table)
}

/// Frequency distributions for the requested sides, rendered as bars.
pub fn run_freq(args: &FreqArgs) -> Result<String, CliError> {
    let pairs = load_dataset(&args.dataset).map_err(|e| dataset_failure(&args.dataset, e))?;
    let mut dists: Vec<FrequencyDistribution> = Vec::new();
    for &source in args.source.sources() {
        let assignments = side_assignments(&pairs, source);
        let d = frequency(&assignments, source).map_err(|e| failure(format!("{} side: {e}", source.key())))?;
        dists.extend(d);
    }
    let bars = render_frequency_bars(&dists);
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_file(&dir.join("frequency.csv"), &frequency_to_csv(&dists))?;
        write_file(&dir.join("frequency.json"), &pretty(&frequency_to_json(&dists)))?;
        write_file(&dir.join("frequency.txt"), &bars)?;
    }
    Ok(bars)
}
