//! Command-line front end: `run`, `bench`, `index` and `inspect`.
//!
//! Configuration is layered: built-in defaults, then `geoflow.toml` (or
//! `--config`), then `GF_<FIELD>` environment variables, then flags.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use crate::bench::{self, BenchRunner, ReportFormat};
use crate::engine::{BackendKind, Engine, EngineConfig, SUMMARY_FILE};
use crate::error::{Error, Result};
use crate::llm::{CallBudget, Gateway};
use crate::model::{load_ledger, Stage, StageScope, TaskInstruction, Workspace};
use crate::retrieval::{ingest_tree, Tier, VectorIndex};

pub const CONFIG_FILE: &str = "geoflow.toml";
pub const ENV_PREFIX: &str = "GF_";

#[derive(Debug, Parser)]
#[command(name = "geoflow", version, about = "Plan, build and run Earth-observation workflows from a task description")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one task over a set of input files.
    Run(RunArgs),
    /// Score the engine on a directory of benchmark cases.
    Bench(BenchArgs),
    /// Build a catalog index from a source tree.
    Index(IndexArgs),
    /// Summarize a finished run directory.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Http,
    Scripted,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Configuration file (default: ./geoflow.toml when present).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<Backend>,
    /// Fixture file for the scripted backend.
    #[arg(long, global = true)]
    pub fixture: Option<PathBuf>,
    #[arg(long, global = true)]
    pub llm_endpoint: Option<String>,
    #[arg(long, global = true)]
    pub llm_model: Option<String>,
    #[arg(long, global = true)]
    pub max_calls: Option<usize>,
    #[arg(long, global = true)]
    pub max_debug_rounds: Option<u32>,
    #[arg(long, global = true)]
    pub probe_attempts: Option<u32>,
    #[arg(long, global = true)]
    pub node_timeout_secs: Option<f64>,
    #[arg(long, global = true)]
    pub case_timeout_secs: Option<f64>,
    #[arg(long, global = true)]
    pub plan_candidates: Option<usize>,
    #[arg(long, global = true)]
    pub merge_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub disable_data_summary: bool,
    #[arg(long, global = true)]
    pub disable_planner: bool,
    #[arg(long, global = true)]
    pub disable_checker: bool,
    #[arg(long, global = true)]
    pub disable_knowledge: bool,
    #[arg(long, global = true)]
    pub disable_tools: bool,
    /// Ask the checker role for a revision focus on each failure.
    #[arg(long, global = true)]
    pub checker_focus: bool,
    /// Run independent nodes concurrently.
    #[arg(long, global = true)]
    pub parallel: bool,
    /// Interpreter command template, e.g. "python3 {script}".
    #[arg(long, global = true)]
    pub interpreter: Option<String>,
    #[arg(long, global = true)]
    pub catalog_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub knowledge_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub prompts_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workspace_base: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Full,
    DataPreparation,
    FeatureExtraction,
    GeospatialAnalysis,
}

impl From<Scope> for StageScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::Full => StageScope::FullPipeline,
            Scope::DataPreparation => StageScope::DataPreparation,
            Scope::FeatureExtraction => StageScope::FeatureExtraction,
            Scope::GeospatialAnalysis => StageScope::GeospatialAnalysis,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Task text.
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value = "task")]
    pub task_id: String,
    /// Input file; repeat for several.
    #[arg(long = "data", required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    pub scope: Scope,
    /// Run directory name under <workspace_base>/runs (default: timestamp).
    #[arg(long)]
    pub run_id: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    #[value(alias = "stage")]
    StageWise,
    #[value(alias = "e2e")]
    EndToEnd,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Directory of case bundles.
    #[arg(long)]
    pub cases: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: Mode,
    /// Reports and run directories go here.
    #[arg(long, default_value = "bench_out")]
    pub out: PathBuf,
    /// Only these case ids; repeat for several.
    #[arg(long = "case")]
    pub only: Vec<String>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Source tree of documents, scripts and `*.jsonl` catalogs.
    #[arg(long)]
    pub src: PathBuf,
    /// Index directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Run directory (the one holding ledger.jsonl).
    pub run: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// A parsed command line with its fully resolved configuration.
#[derive(Debug)]
pub struct Invocation {
    pub command: Command,
    pub config: EngineConfig,
}

/// Parse failure: clap's rendered message and the process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
}

fn config_args(cmd: &Command) -> &ConfigArgs {
    match cmd {
        Command::Run(a) => &a.config,
        Command::Bench(a) => &a.config,
        Command::Index(a) => &a.config,
        Command::Inspect(a) => &a.config,
    }
}

fn overlay(base: &mut Map<String, Value>, top: Map<String, Value>) {
    for (k, v) in top {
        base.insert(k, v);
    }
}

fn file_layer(path: &Path) -> std::result::Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let doc: toml::Table = toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    match serde_json::to_value(doc) {
        Ok(Value::Object(m)) => Ok(m),
        _ => Err(CliError::usage(format!("{}: not a table", path.display()))),
    }
}

/// `GF_<FIELD>` variables. Numbers, booleans and maps are parsed as JSON;
/// everything else is taken as a string.
fn env_layer(defaults: &Map<String, Value>, env: &BTreeMap<String, String>) -> std::result::Result<Map<String, Value>, CliError> {
    let mut out = Map::new();
    let fields = defaults.keys().cloned().chain(["llm_api_key".to_string()]);
    for field in fields {
        let Some(raw) = env.get(&format!("{ENV_PREFIX}{}", field.to_ascii_uppercase())) else {
            continue;
        };
        let value = match defaults.get(&field) {
            Some(Value::Number(_) | Value::Bool(_) | Value::Object(_)) => {
                let raw = match raw.trim() {
                    "yes" | "on" => "true",
                    "no" | "off" => "false",
                    other => other,
                };
                serde_json::from_str(raw).map_err(|e| CliError::usage(format!("{ENV_PREFIX}{}: {e}", field.to_ascii_uppercase())))?
            }
            _ => Value::String(raw.clone()),
        };
        out.insert(field, value);
    }
    Ok(out)
}

fn flag_layer(a: &ConfigArgs) -> Map<String, Value> {
    let mut m = Map::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            m.insert(k.into(), v);
        }
    };
    put(
        "backend",
        a.backend.map(|b| Value::from(match b {
            Backend::Http => "http",
            Backend::Scripted => "scripted",
        })),
    );
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::from(p.display().to_string()));
    put("fixture", path(&a.fixture));
    put("llm_endpoint", a.llm_endpoint.clone().map(Value::from));
    put("llm_model", a.llm_model.clone().map(Value::from));
    put("max_calls", a.max_calls.map(Value::from));
    put("max_debug_rounds", a.max_debug_rounds.map(Value::from));
    put("probe_attempts", a.probe_attempts.map(Value::from));
    put("node_timeout_secs", a.node_timeout_secs.map(Value::from));
    put("case_timeout_secs", a.case_timeout_secs.map(Value::from));
    put("plan_candidates", a.plan_candidates.map(Value::from));
    put("merge_threshold", a.merge_threshold.map(Value::from));
    put("interpreter", a.interpreter.clone().map(Value::from));
    put("catalog_dir", path(&a.catalog_dir));
    put("knowledge_dir", path(&a.knowledge_dir));
    put("prompts_dir", path(&a.prompts_dir));
    put("workspace_base", path(&a.workspace_base));
    for (k, on) in [
        ("disable_data_summary", a.disable_data_summary),
        ("disable_planner", a.disable_planner),
        ("disable_checker", a.disable_checker),
        ("disable_knowledge", a.disable_knowledge),
        ("disable_tools", a.disable_tools),
        ("checker_focus", a.checker_focus),
        ("parallel", a.parallel),
    ] {
        if on {
            m.insert(k.into(), Value::Bool(true));
        }
    }
    m
}

/// Merges the configuration layers for `args`.
pub fn resolve_config(args: &ConfigArgs, env: &BTreeMap<String, String>, cwd: &Path) -> std::result::Result<EngineConfig, CliError> {
    let defaults = match serde_json::to_value(EngineConfig::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config serializes to an object"),
    };
    let mut merged = defaults.clone();
    let file = match &args.config {
        Some(p) => Some(p.clone()),
        None => Some(cwd.join(CONFIG_FILE)).filter(|p| p.is_file()),
    };
    if let Some(f) = file {
        overlay(&mut merged, file_layer(&f)?);
    }
    overlay(&mut merged, env_layer(&defaults, env)?);
    overlay(&mut merged, flag_layer(args));
    let cfg: EngineConfig = serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::usage(format!("configuration: {e}")))?;
    cfg.check().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(cfg)
}

/// Parses `argv` (program name first) against an explicit environment.
pub fn parse_command(argv: &[String], env: &BTreeMap<String, String>, cwd: &Path) -> std::result::Result<Invocation, CliError> {
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError { code: e.exit_code(), message: e.render().to_string() })?;
    let config = resolve_config(config_args(&cli.command), env, cwd)?;
    Ok(Invocation { command: cli.command, config })
}

/// Exit status for an engine error: 1 for task failures, 2 for usage and
/// configuration problems.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::CaseInvalid(_) | Error::SandboxMisconfigured(_) | Error::InvalidRule { .. } => 2,
        _ => 1,
    }
}

fn default_run_id() -> String {
    chrono::Utc::now().format("run-%Y%m%d-%H%M%S").to_string()
}

fn run(args: &RunArgs, cfg: EngineConfig, out: &mut dyn Write) -> Result<i32> {
    let task = TaskInstruction::new(&args.task_id, &args.task)?.with_scope(args.scope.into());
    let engine = Engine::from_config(cfg)?;
    let run_id = args.run_id.clone().unwrap_or_else(default_run_id);
    let run = engine.run_task(&task, &args.data, &run_id)?;
    let w = |e: std::io::Error| Error::io(&run.ws.root, e);
    writeln!(out, "run: {}", run.ws.root.display()).map_err(w)?;
    for o in &run.result.outcomes {
        let status = serde_json::to_value(o.status)?;
        writeln!(
            out,
            "  {:<16} {:<20} {:<10} rounds={} debug_rounds={}",
            o.node_id,
            o.stage.as_str(),
            status.as_str().unwrap_or_default(),
            o.rounds,
            o.debug_rounds
        )
        .map_err(w)?;
        if let Some(err) = &o.error {
            writeln!(out, "    {err}").map_err(w)?;
        }
    }
    Ok(if run.succeeded() { 0 } else { 1 })
}

fn bench_cmd(args: &BenchArgs, mut cfg: EngineConfig, out: &mut dyn Write) -> Result<i32> {
    if args.config.workspace_base.is_none() {
        cfg.workspace_base = args.out.clone();
    }
    let mut cases = bench::load_cases(&args.cases)?;
    if !args.only.is_empty() {
        cases.retain(|c| args.only.contains(&c.case_id));
    }
    if cases.is_empty() {
        return Err(Error::CaseInvalid(format!("no cases under {}", args.cases.display())));
    }
    let runner = BenchRunner::new(cfg)?;
    let modes: &[(Mode, &str)] = match args.mode {
        Mode::StageWise => &[(Mode::StageWise, "stage_wise")],
        Mode::EndToEnd => &[(Mode::EndToEnd, "end_to_end")],
        Mode::Both => &[(Mode::StageWise, "stage_wise"), (Mode::EndToEnd, "end_to_end")],
    };
    let format = match args.format {
        Format::Text => ReportFormat::Text,
        Format::Json => ReportFormat::Json,
    };
    for (mode, dir) in modes {
        let report = match mode {
            Mode::EndToEnd => runner.run_end_to_end(&cases),
            _ => runner.run_stage_wise(&cases),
        };
        let dir = args.out.join(dir);
        bench::write_report(&report, &dir)?;
        out.write_all(bench::emit_report(&report, format)?.as_bytes()).map_err(|e| Error::io(&dir, e))?;
        writeln!(out).map_err(|e| Error::io(&dir, e))?;
    }
    Ok(0)
}

fn index_cmd(args: &IndexArgs, cfg: EngineConfig, out: &mut dyn Write) -> Result<i32> {
    let describable = match cfg.backend {
        BackendKind::Http => cfg.llm_endpoint.is_some(),
        BackendKind::Scripted => cfg.fixture.is_some(),
    };
    let gateway = if describable {
        Some(Gateway::new(cfg.build_backend()?, CallBudget::new(cfg.max_calls), Arc::new(cfg.prompt_library()?)))
    } else {
        None
    };
    let entries = ingest_tree(&args.src, gateway.as_ref(), None)?;
    let mut index = match args.out.exists() {
        true => VectorIndex::load(&args.out, Arc::new(crate::retrieval::HashEmbedder))?,
        false => VectorIndex::default(),
    };
    index.add(entries)?;
    index.persist(&args.out)?;
    let w = |e: std::io::Error| Error::io(&args.out, e);
    writeln!(out, "index: {} ({} entries)", args.out.display(), index.len()).map_err(w)?;
    for tier in Tier::ALL {
        let n = index.entries().iter().filter(|e| e.tier == tier).count();
        writeln!(out, "  {:<18} {n}", tier.as_str()).map_err(w)?;
    }
    Ok(0)
}

fn inspect_cmd(args: &InspectArgs, out: &mut dyn Write) -> Result<i32> {
    let ws = Workspace::open_root(&args.run)?;
    let ledger = load_ledger(&ws)?;
    let metrics = bench::ledger_stage_metrics(&ledger.events);
    let mut kinds: BTreeMap<String, usize> = BTreeMap::new();
    for e in &ledger.events {
        let k = serde_json::to_value(e.kind)?.as_str().unwrap_or_default().to_string();
        *kinds.entry(k).or_default() += 1;
    }
    let summary_path = ws.root.join(SUMMARY_FILE);
    let summary: Value = match std::fs::read_to_string(&summary_path) {
        Ok(t) => serde_json::from_str(&t)?,
        Err(_) => Value::Null,
    };
    let w = |e: std::io::Error| Error::io(&args.run, e);
    match args.format {
        Format::Json => {
            let stages: Map<String, Value> = metrics
                .iter()
                .map(|(s, (d, t))| (s.as_str().to_string(), serde_json::json!({"debug_rounds": d, "running_time_secs": t.as_secs_f64()})))
                .collect();
            let doc = serde_json::json!({
                "run_id": ws.run_id,
                "events": ledger.events.len(),
                "torn_lines": ledger.torn_lines,
                "event_kinds": kinds,
                "stages": stages,
                "summary": summary,
            });
            writeln!(out, "{}", serde_json::to_string_pretty(&doc)?).map_err(w)?;
        }
        Format::Text => {
            writeln!(out, "run: {} ({} events)", ws.run_id, ledger.events.len()).map_err(w)?;
            if ledger.torn_lines > 0 {
                writeln!(out, "  torn trailing lines: {}", ledger.torn_lines).map_err(w)?;
            }
            if let Some(ok) = summary.get("success").and_then(Value::as_bool) {
                writeln!(out, "success: {ok}").map_err(w)?;
            }
            for (k, n) in &kinds {
                writeln!(out, "  {k:<14} {n}").map_err(w)?;
            }
            for s in Stage::ALL {
                if let Some((d, t)) = metrics.get(&s) {
                    writeln!(out, "{:<20} debug_rounds={d} running_time={:.3}s", s.as_str(), t.as_secs_f64()).map_err(w)?;
                }
            }
        }
    }
    Ok(0)
}

/// Executes a parsed invocation, writing human output to `out`.
pub fn execute(inv: Invocation, out: &mut dyn Write) -> Result<i32> {
    match &inv.command {
        Command::Run(a) => run(a, inv.config, out),
        Command::Bench(a) => bench_cmd(a, inv.config, out),
        Command::Index(a) => index_cmd(a, inv.config, out),
        Command::Inspect(a) => inspect_cmd(a, out),
    }
}

/// Entry point shared by the binary: parse, execute, map errors to codes.
pub fn main_with(argv: &[String], env: &BTreeMap<String, String>, cwd: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let inv = match parse_command(argv, env, cwd) {
        Ok(inv) => inv,
        Err(e) => {
            let sink: &mut dyn Write = if e.code == 0 { out } else { err };
            let _ = write!(sink, "{}", e.message);
            if !e.message.ends_with('\n') {
                let _ = writeln!(sink);
            }
            return e.code;
        }
    };
    match execute(inv, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
