//! Per-node tool creation and the synthesize → execute → check → revise
//! loop, plus the workflow runner that walks a DAG in topological order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::llm::{extract_code, Gateway, RoleTag};
use crate::model::{EventKind, Ledger, Stage, Workspace};
use crate::payload;
use crate::planner::{validate_dag, WorkflowDag, WorkflowNode};
use crate::probe::DataProfile;
use crate::retrieval::{Hit, Retrieval, Tier, DEFAULT_KNOWLEDGE_K, DEFAULT_SCRIPT_K};
use crate::sandbox::{execute_script, ExecutionRecord, SandboxConfig, ToolScript, DEFAULT_INTERPRETER, DEFAULT_TIMEOUT};
use crate::validation::{default_rules_for, evaluate_rules, ValidationReport, ValidationRule};

pub const DEFAULT_MAX_ROUNDS: u32 = 10;
/// File in each node directory holding the node with absolute bindings.
pub const NODE_FILE: &str = "node.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    RuntimeError,
    ValidationFailure,
}

impl FeedbackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackKind::RuntimeError => "runtime_error",
            FeedbackKind::ValidationFailure => "validation_failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticFeedback {
    pub node_id: String,
    pub round: u32,
    pub kind: FeedbackKind,
    pub detail: String,
    pub suggested_focus: Option<String>,
}

/// What is left of a node that never converged.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFailure {
    pub node_id: String,
    pub rounds: u32,
    /// `None` only when no round was allowed.
    pub record: Option<ExecutionRecord>,
    pub report: ValidationReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRun {
    pub record: ExecutionRecord,
    pub report: ValidationReport,
    pub debug_rounds: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutorConfig {
    /// Synthesize/execute cycles allowed per node (first attempt included).
    pub max_rounds: u32,
    pub interpreter: String,
    pub timeout: Duration,
    pub stage_timeouts: BTreeMap<Stage, Duration>,
    /// One-shot execution: failures are recorded but never revised.
    pub disable_checker: bool,
    /// Ask the checker role for a focus hint before each revision.
    pub checker_focus: bool,
    pub disable_knowledge: bool,
    pub disable_tools: bool,
    pub script_k: usize,
    pub knowledge_k: usize,
    /// Run nodes without an ancestor relation concurrently.
    pub parallel: bool,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig {
            max_rounds: DEFAULT_MAX_ROUNDS,
            interpreter: DEFAULT_INTERPRETER.into(),
            timeout: DEFAULT_TIMEOUT,
            stage_timeouts: BTreeMap::new(),
            disable_checker: false,
            checker_focus: false,
            disable_knowledge: false,
            disable_tools: false,
            script_k: DEFAULT_SCRIPT_K,
            knowledge_k: DEFAULT_KNOWLEDGE_K,
            parallel: false,
        }
    }
}

impl ExecutorConfig {
    pub fn sandbox_for(&self, ws: &Workspace, node: &WorkflowNode, workdir: &Path) -> SandboxConfig {
        let timeout = self.stage_timeouts.get(&node.stage).copied().unwrap_or(self.timeout);
        SandboxConfig::new(&ws.root, workdir)
            .with_interpreter(self.interpreter.clone())
            .with_timeout(timeout)
    }
}

/// Shared services one workflow run needs.
#[derive(Clone, Copy)]
pub struct RunContext<'a> {
    pub ws: &'a Workspace,
    pub profile: &'a DataProfile,
    pub retrieval: &'a Retrieval,
    pub gateway: &'a Gateway,
    pub cfg: &'a ExecutorConfig,
}

/// Rules a node's outputs are checked against: defaults per output kind
/// plus any listed under `params.rules`.
pub fn node_rules(node: &WorkflowNode) -> Result<Vec<ValidationRule>> {
    let mut rules: Vec<ValidationRule> = Vec::new();
    let mut seen = BTreeSet::new();
    for o in &node.outputs {
        for r in default_rules_for(&o.kind, &o.name) {
            if seen.insert(r.rule_id.clone()) {
                rules.push(r);
            }
        }
    }
    if let Some(extra) = node.params.get("rules") {
        let extra: Vec<ValidationRule> = serde_json::from_value(extra.clone())?;
        for r in extra {
            r.check()?;
            if seen.insert(r.rule_id.clone()) {
                rules.push(r);
            }
        }
    }
    Ok(rules)
}

fn absolute_binding(ws: &Workspace, binding: &str) -> PathBuf {
    let p = Path::new(binding);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        ws.root.join(p)
    }
}

/// Writes `node.json`: the node with every binding made absolute, plus the
/// command templates of any retrieved external-command tools.
pub fn write_node_file(ws: &Workspace, node: &WorkflowNode, dir: &Path, tools: &[Hit<'_>]) -> Result<()> {
    let ports = |ports: &[crate::planner::Port]| -> Map<String, Value> {
        ports
            .iter()
            .map(|p| (p.name.clone(), Value::from(absolute_binding(ws, &p.binding).display().to_string())))
            .collect()
    };
    let doc = json!({
        "id": node.node_id,
        "purpose": node.purpose,
        "stage": node.stage,
        "inputs": ports(&node.inputs),
        "outputs": ports(&node.outputs),
        "params": node.params,
        "tools": tools
            .iter()
            .filter(|h| h.entry.tier == Tier::ExternalCommand)
            .map(|h| (h.entry.entry_id.clone(), Value::from(h.entry.body.clone())))
            .collect::<Map<String, Value>>(),
        "workspace": ws.root.display().to_string(),
    });
    let path = dir.join(NODE_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&path, e))
}

fn render_refs(hits: &[Hit<'_>]) -> String {
    if hits.is_empty() {
        return "(none)".into();
    }
    let mut s = String::new();
    for h in hits {
        let _ = writeln!(s, "### {} ({})\n{}", h.entry.entry_id, h.entry.tier.as_str(), h.entry.description);
        match h.entry.tier {
            Tier::ExternalCommand => {
                let _ = writeln!(s, "command: {}", h.entry.body);
            }
            _ if h.entry.body != h.entry.description => {
                let _ = writeln!(s, "```\n{}\n```", h.entry.body.trim_end());
            }
            _ => {}
        }
    }
    s.trim_end().to_string()
}

/// Round-1 tool for a node.
pub fn synthesize_node_tool(
    node: &WorkflowNode,
    profile: &DataProfile,
    script_refs: &[Hit<'_>],
    knowledge_refs: &[Hit<'_>],
    rules: &[ValidationRule],
    gateway: &Gateway,
    ledger: Option<&Ledger>,
) -> Result<ToolScript> {
    if node.outputs.is_empty() {
        return Err(Error::Parameter(format!("node {} has no outputs to manifest", node.node_id)));
    }
    let ctx = payload!(
        "node" => serde_json::to_string_pretty(node)?,
        "profile" => profile.context_text(),
        "references" => render_refs(script_refs),
        "knowledge" => render_refs(knowledge_refs),
        "rules" => serde_json::to_string(rules)?,
    );
    let req = gateway.request(RoleTag::Coder, "code", &ctx)?.with_stage(Some(node.stage));
    let resp = gateway.complete(&req, ledger)?;
    Ok(ToolScript {
        node_id: node.node_id.clone(),
        round: 1,
        body: extract_code(&resp.text),
        interpreter: DEFAULT_INTERPRETER.into(),
        references: script_refs
            .iter()
            .chain(knowledge_refs)
            .map(|h| h.entry.entry_id.clone())
            .collect(),
    })
}

/// Round k+1 tool from round k and its feedback.
pub fn revise_tool(
    script: &ToolScript,
    feedback: &DiagnosticFeedback,
    node: &WorkflowNode,
    gateway: &Gateway,
    ledger: Option<&Ledger>,
) -> Result<ToolScript> {
    if feedback.node_id != script.node_id || feedback.round != script.round {
        return Err(Error::Parameter(format!(
            "feedback for {} round {} does not match script {} round {}",
            feedback.node_id, feedback.round, script.node_id, script.round
        )));
    }
    let focus = match &feedback.suggested_focus {
        Some(f) => format!("\nChecker's suggestion: {f}\n"),
        None => String::new(),
    };
    let ctx = payload!(
        "node" => serde_json::to_string_pretty(node)?,
        "round" => script.round,
        "previous" => script.body,
        "kind" => feedback.kind.as_str(),
        "detail" => feedback.detail,
        "focus" => focus,
    );
    let req = gateway.request(RoleTag::Coder, "revise", &ctx)?.with_stage(Some(node.stage));
    let resp = gateway.complete(&req, ledger)?;
    Ok(ToolScript {
        node_id: script.node_id.clone(),
        round: script.round + 1,
        body: extract_code(&resp.text),
        interpreter: script.interpreter.clone(),
        references: script.references.clone(),
    })
}

fn retrieve<'r>(ctx: &RunContext<'r>, node: &WorkflowNode) -> Result<(Vec<Hit<'r>>, Vec<Hit<'r>>)> {
    let index = ctx.retrieval.index.as_ref();
    if index.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let query = format!("{} {}", node.purpose, node.outputs.iter().map(|o| o.kind.as_str()).collect::<Vec<_>>().join(" "));
    let scripts = if ctx.cfg.disable_tools || ctx.cfg.script_k == 0 {
        Vec::new()
    } else {
        index
            .hits(&query, index.len(), None)?
            .into_iter()
            .filter(|h| h.entry.tier != Tier::KnowledgeChunk)
            .take(ctx.cfg.script_k)
            .collect()
    };
    let knowledge = if ctx.cfg.disable_knowledge || ctx.cfg.knowledge_k == 0 {
        Vec::new()
    } else {
        index.hits(&query, ctx.cfg.knowledge_k, Some(Tier::KnowledgeChunk))?
    };
    Ok((scripts, knowledge))
}

fn check_record(record: &ExecutionRecord, rules: &[ValidationRule], workdir: &Path) -> ValidationReport {
    if record.timed_out {
        return ValidationReport::single_failure("runtime", record.traceback.clone().unwrap_or_else(|| "timed out".into()));
    }
    if record.exit_status != 0 {
        let detail = record
            .traceback
            .clone()
            .unwrap_or_else(|| format!("exit status {}", record.exit_status));
        return ValidationReport::single_failure("runtime", detail);
    }
    if let Some(err) = &record.manifest_error {
        return ValidationReport::single_failure("manifest", format!("manifest.json could not be read: {err}"));
    }
    evaluate_rules(record.manifest.as_ref(), rules, workdir)
}

fn checker_focus(node: &WorkflowNode, record: &ExecutionRecord, detail: &str, gateway: &Gateway, ledger: &Ledger) -> Result<Option<String>> {
    let ctx = payload!(
        "node" => serde_json::to_string_pretty(node)?,
        "detail" => detail,
        "stdout" => record.stdout_tail,
    );
    let req = gateway.request(RoleTag::Checker, "check", &ctx)?.with_stage(Some(node.stage));
    let text = gateway.complete(&req, Some(ledger))?.text.trim().to_string();
    Ok((!text.is_empty()).then_some(text))
}

/// Synthesize → execute → check → revise until the node's outputs pass or
/// `max_rounds` cycles are spent. `debug_rounds` is the number of
/// revisions, which equals the node's `revision` ledger events.
pub fn run_node_loop(node: &WorkflowNode, ctx: &RunContext<'_>, max_rounds: u32) -> Result<NodeRun> {
    let ledger = ctx.ws.ledger().as_ref();
    let stage = Some(node.stage);
    let id = node.node_id.as_str();
    let rules = node_rules(node)?;
    ledger.append(
        stage,
        EventKind::NodeStarted,
        payload!("node_id" => id, "purpose" => node.purpose, "max_rounds" => max_rounds),
    )?;
    if max_rounds == 0 {
        return Err(Error::NodeFailed(Box::new(NodeFailure {
            node_id: id.into(),
            rounds: 0,
            record: None,
            report: ValidationReport::single_failure("budget", "no rounds allowed"),
        })));
    }
    let dir = ctx.ws.node_path(id)?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (script_refs, knowledge_refs) = retrieve(ctx, node)?;
    write_node_file(ctx.ws, node, &dir, &script_refs)?;
    let sandbox = ctx.cfg.sandbox_for(ctx.ws, node, &dir);

    let mut script = synthesize_node_tool(node, ctx.profile, &script_refs, &knowledge_refs, &rules, ctx.gateway, Some(ledger))?;
    loop {
        script.interpreter = sandbox.interpreter.clone();
        let round = script.round;
        ledger.append(
            stage,
            EventKind::ToolCreated,
            payload!("node_id" => id, "round" => round, "references" => script.references, "body" => script.body),
        )?;
        let record = execute_script(&script, &sandbox)?;
        ledger.append(
            stage,
            EventKind::Execution,
            payload!(
                "node_id" => id,
                "round" => round,
                "exit_status" => record.exit_status,
                "timed_out" => record.timed_out,
                "traceback" => record.traceback,
                "artifacts" => record.manifest.as_ref().map(|m| m.artifacts.len()),
            ),
        )?;
        let report = check_record(&record, &rules, &dir);
        ledger.append(
            stage,
            EventKind::Validation,
            payload!("node_id" => id, "round" => round, "pass" => report.pass, "failures" => report.failures),
        )?;
        let success = record.succeeded() && report.pass;
        if success {
            return Ok(NodeRun { record, report, debug_rounds: round - 1 });
        }
        if ctx.cfg.disable_checker || round >= max_rounds {
            return Err(Error::NodeFailed(Box::new(NodeFailure {
                node_id: id.into(),
                rounds: round,
                record: Some(record),
                report,
            })));
        }
        let kind = if record.succeeded() { FeedbackKind::ValidationFailure } else { FeedbackKind::RuntimeError };
        let detail = match kind {
            FeedbackKind::RuntimeError => report.describe().trim_start_matches("runtime: ").to_string(),
            FeedbackKind::ValidationFailure => report.describe(),
        };
        let detail = if detail.trim().is_empty() { format!("exit status {}", record.exit_status) } else { detail };
        let suggested_focus = if ctx.cfg.checker_focus {
            checker_focus(node, &record, &detail, ctx.gateway, ledger)?
        } else {
            None
        };
        let feedback = DiagnosticFeedback { node_id: id.into(), round, kind, detail, suggested_focus };
        ledger.append(
            stage,
            EventKind::Revision,
            payload!(
                "node_id" => id,
                "round" => round + 1,
                "kind" => feedback.kind,
                "detail" => feedback.detail,
                "suggested_focus" => feedback.suggested_focus,
            ),
        )?;
        script = revise_tool(&script, &feedback, node, ctx.gateway, Some(ledger))?;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Completed,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeOutcome {
    pub node_id: String,
    pub stage: Stage,
    pub status: NodeStatus,
    /// Synthesize/execute cycles spent (0 for skipped nodes).
    pub rounds: u32,
    pub debug_rounds: u32,
    pub record: Option<ExecutionRecord>,
    pub report: Option<ValidationReport>,
    pub error: Option<String>,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunResult {
    /// In execution order.
    pub outcomes: Vec<NodeOutcome>,
    pub stage_timings: BTreeMap<Stage, Duration>,
}

impl RunResult {
    pub fn outcome(&self, node_id: &str) -> Option<&NodeOutcome> {
        self.outcomes.iter().find(|o| o.node_id == node_id)
    }

    pub fn all_completed(&self) -> bool {
        self.outcomes.iter().all(|o| o.status == NodeStatus::Completed)
    }

    pub fn first_failure(&self) -> Option<&NodeOutcome> {
        self.outcomes.iter().find(|o| o.status == NodeStatus::Failed)
    }
}

fn run_one(node: &WorkflowNode, ctx: &RunContext<'_>) -> Result<NodeOutcome> {
    let started = Instant::now();
    let result = run_node_loop(node, ctx, ctx.cfg.max_rounds);
    let wall_time = started.elapsed();
    let base = NodeOutcome {
        node_id: node.node_id.clone(),
        stage: node.stage,
        status: NodeStatus::Completed,
        rounds: 0,
        debug_rounds: 0,
        record: None,
        report: None,
        error: None,
        wall_time,
    };
    Ok(match result {
        Ok(run) => NodeOutcome {
            rounds: run.debug_rounds + 1,
            debug_rounds: run.debug_rounds,
            record: Some(run.record),
            report: Some(run.report),
            ..base
        },
        Err(Error::NodeFailed(f)) => {
            let error = Error::NodeFailed(f.clone()).to_string();
            NodeOutcome {
                status: NodeStatus::Failed,
                rounds: f.rounds,
                debug_rounds: f.rounds.saturating_sub(1),
                record: f.record,
                report: Some(f.report),
                error: Some(error),
                ..base
            }
        }
        // Hard sandbox problems are configuration errors, not node failures.
        Err(e @ Error::SandboxMisconfigured(_)) => return Err(e),
        Err(e) => NodeOutcome { status: NodeStatus::Failed, error: Some(e.to_string()), ..base },
    })
}

fn skipped(node: &WorkflowNode, culprit: &str, ledger: &Ledger) -> Result<NodeOutcome> {
    ledger.append(
        Some(node.stage),
        EventKind::NodeSkipped,
        payload!("node_id" => node.node_id, "reason" => format!("upstream node {culprit} did not complete")),
    )?;
    Ok(NodeOutcome {
        node_id: node.node_id.clone(),
        stage: node.stage,
        status: NodeStatus::Skipped,
        rounds: 0,
        debug_rounds: 0,
        record: None,
        report: None,
        error: Some(format!("skipped: upstream node {culprit} did not complete")),
        wall_time: Duration::ZERO,
    })
}

/// Runs every node of a validated DAG in topological order. A node that
/// fails takes its descendants down with it (they are marked skipped);
/// independent branches carry on.
pub fn run_workflow(dag: &WorkflowDag, ctx: &RunContext<'_>) -> Result<RunResult> {
    let report = validate_dag(dag, ctx.profile);
    if !report.ok() {
        return Err(Error::CompileFailed { report });
    }
    let parents = dag.parents();
    let mut done: BTreeMap<String, NodeStatus> = BTreeMap::new();
    let mut outcomes: Vec<NodeOutcome> = Vec::new();
    let ledger = ctx.ws.ledger().as_ref();

    let blocked_by = |id: &str, done: &BTreeMap<String, NodeStatus>| -> Option<String> {
        parents[id]
            .iter()
            .find(|p| done.get(**p).is_some_and(|s| *s != NodeStatus::Completed))
            .map(|p| p.to_string())
    };

    if ctx.cfg.parallel {
        let mut remaining: Vec<&str> = report.order.iter().map(String::as_str).collect();
        while !remaining.is_empty() {
            let (ready, rest): (Vec<&str>, Vec<&str>) = remaining
                .iter()
                .partition(|id| parents[**id].iter().all(|p| done.contains_key(*p)));
            remaining = rest;
            let results = Mutex::new(BTreeMap::new());
            let mut to_run = Vec::new();
            for id in ready {
                let node = dag.node(id).unwrap();
                match blocked_by(id, &done) {
                    Some(culprit) => {
                        outcomes.push(skipped(node, &culprit, ledger)?);
                    }
                    None => to_run.push(node),
                }
            }
            std::thread::scope(|s| {
                for node in &to_run {
                    let results = &results;
                    s.spawn(move || {
                        let r = run_one(node, ctx);
                        results.lock().unwrap().insert(node.node_id.clone(), r);
                    });
                }
            });
            for (_, r) in results.into_inner().unwrap() {
                outcomes.push(r?);
            }
            for o in &outcomes {
                done.insert(o.node_id.clone(), o.status);
            }
        }
    } else {
        for id in &report.order {
            let node = dag.node(id).unwrap();
            let outcome = match blocked_by(id, &done) {
                Some(culprit) => skipped(node, &culprit, ledger)?,
                None => run_one(node, ctx)?,
            };
            done.insert(id.clone(), outcome.status);
            outcomes.push(outcome);
        }
    }

    let mut stage_timings: BTreeMap<Stage, Duration> = BTreeMap::new();
    for o in &outcomes {
        *stage_timings.entry(o.stage).or_default() += o.wall_time;
    }
    for stage in Stage::ALL {
        let of_stage: Vec<&NodeOutcome> = outcomes.iter().filter(|o| o.stage == stage).collect();
        if of_stage.is_empty() {
            continue;
        }
        let count = |s: NodeStatus| of_stage.iter().filter(|o| o.status == s).count();
        ledger.append(
            Some(stage),
            EventKind::StageDone,
            payload!(
                "nodes" => of_stage.len(),
                "completed" => count(NodeStatus::Completed),
                "failed" => count(NodeStatus::Failed),
                "skipped" => count(NodeStatus::Skipped),
                "debug_rounds" => of_stage.iter().map(|o| o.debug_rounds).sum::<u32>(),
            ),
        )?;
    }
    Ok(RunResult { outcomes, stage_timings })
}
