//! Benchmark harness: case bundles, per-stage scoring against ground
//! truth, stage-wise and end-to-end runners, and the accuracy / debug
//! rounds / running time report.
//!
//! A case bundle is a directory holding `case.json`, its input files,
//! ground truth under `truth/<stage>/` and scripted-backend fixtures under
//! `fixtures/<stage>.json` and `fixtures/end_to_end.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::engine::{BackendKind, Engine, EngineConfig, TaskRun};
use crate::error::{Error, Result};
use crate::executor::NodeStatus;
use crate::llm::{Backend, ScriptedBackend, ScriptedFixture};
use crate::manifest::{ArtifactKind, ArtifactManifest, ArtifactStats};
use crate::model::{EventKind, LedgerEvent, Stage, StageScope, TaskInstruction, Workspace};
use crate::retrieval::{CatalogEntry, Retrieval, VectorIndex};
use crate::validation::read_ascii_grid;

pub const CASE_FILE: &str = "case.json";
pub const TRUTH_DIR: &str = "truth";
pub const FIXTURES_DIR: &str = "fixtures";
pub const END_TO_END_FIXTURE: &str = "end_to_end.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const DEFAULT_REL_TOL: f64 = 0.01;
pub const DEFAULT_ABS_TOL: f64 = 1e-6;
/// Placeholder in tool command templates replaced by the case directory.
pub const CASE_DIR_PLACEHOLDER: &str = "{case_dir}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Urban,
    Agriculture,
    Vegetation,
    Water,
    Soil,
    Economy,
    Snow,
}

impl Domain {
    pub const ALL: [Domain; 7] = [
        Domain::Urban,
        Domain::Agriculture,
        Domain::Vegetation,
        Domain::Water,
        Domain::Soil,
        Domain::Economy,
        Domain::Snow,
    ];
}

fn default_rel() -> f64 {
    DEFAULT_REL_TOL
}

fn default_abs() -> f64 {
    DEFAULT_ABS_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericExpect {
    /// `<artifact>.<stat>`, `results.<key>` or a bare results key.
    pub key: String,
    pub expected: f64,
    #[serde(default = "default_rel")]
    pub rel_tol: f64,
    #[serde(default = "default_abs")]
    pub abs_tol: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageExpectation {
    /// `<artifact>.<field>` (crs, rows, cols, bands, kind, range) or
    /// `results.<key>` mapped to the expected value.
    #[serde(default)]
    pub metadata_expect: Map<String, Value>,
    #[serde(default)]
    pub numeric_expect: Vec<NumericExpect>,
    /// Paths relative to a node directory of the stage.
    #[serde(default)]
    pub location_expect: Vec<String>,
}

impl StageExpectation {
    pub fn check(&self) -> Result<()> {
        if self.metadata_expect.is_empty() && self.numeric_expect.is_empty() && self.location_expect.is_empty() {
            return Err(Error::CaseInvalid("stage expectation is empty".into()));
        }
        for n in &self.numeric_expect {
            if !(n.rel_tol > 0.0 && n.abs_tol > 0.0) {
                return Err(Error::CaseInvalid(format!("tolerances for {} must be positive", n.key)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub case_id: String,
    pub domain: Domain,
    pub instruction: TaskInstruction,
    /// Relative to the case directory in `case.json`; absolute once loaded.
    pub inputs: Vec<PathBuf>,
    pub stage_specs: BTreeMap<Stage, StageExpectation>,
    #[serde(default)]
    pub provided_tools: Vec<CatalogEntry>,
    /// Inputs for stage-wise runs; defaults to the case inputs for the
    /// first stage and the previous stage's ground truth otherwise.
    #[serde(default)]
    pub stage_inputs: BTreeMap<Stage, Vec<PathBuf>>,
    #[serde(skip)]
    pub dir: PathBuf,
}

impl BenchCase {
    pub fn stages(&self) -> Vec<Stage> {
        self.stage_specs.keys().copied().collect()
    }

    pub fn fixture_path(&self, stage: Option<Stage>) -> PathBuf {
        self.dir.join(FIXTURES_DIR).join(fixture_file_name(stage))
    }

    pub fn inputs_for(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        if let Some(explicit) = self.stage_inputs.get(&stage) {
            return Ok(explicit.clone());
        }
        if stage.index() == 0 {
            return Ok(self.inputs.clone());
        }
        let prev = Stage::ALL[stage.index() - 1];
        let dir = self.dir.join(TRUTH_DIR).join(prev.as_str());
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x != "prj"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::CaseInvalid(format!("{}: no ground truth under {}", self.case_id, dir.display())));
        }
        Ok(files)
    }
}

/// `<stage>.json` for stage-wise runs, `end_to_end.json` otherwise.
pub fn fixture_file_name(stage: Option<Stage>) -> String {
    match stage {
        Some(s) => format!("{}.json", s.as_str()),
        None => END_TO_END_FIXTURE.to_string(),
    }
}

fn resolve_in(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// Parses one case bundle and verifies its input files.
pub fn load_case(dir: &Path) -> Result<BenchCase> {
    let path = dir.join(CASE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut case: BenchCase =
        serde_json::from_str(&text).map_err(|e| Error::CaseInvalid(format!("{}: {e}", path.display())))?;
    let dir = dir.canonicalize().map_err(|e| Error::io(dir, e))?;
    case.instruction.check().map_err(|e| Error::CaseInvalid(format!("{}: {e}", case.case_id)))?;
    if case.inputs.is_empty() {
        return Err(Error::CaseInvalid(format!("{}: no inputs", case.case_id)));
    }
    case.inputs = case.inputs.iter().map(|p| resolve_in(&dir, p)).collect();
    for list in case.stage_inputs.values_mut() {
        *list = list.iter().map(|p| resolve_in(&dir, p)).collect();
    }
    for p in case.inputs.iter().chain(case.stage_inputs.values().flatten()) {
        if !p.exists() {
            return Err(Error::CaseInvalid(format!("{}: input {} does not exist", case.case_id, p.display())));
        }
    }
    if case.instruction.stage_scope == StageScope::FullPipeline {
        for s in Stage::ALL {
            if !case.stage_specs.contains_key(&s) {
                return Err(Error::CaseInvalid(format!("{}: missing expectation for {s}", case.case_id)));
            }
        }
    }
    for (stage, spec) in &case.stage_specs {
        spec.check().map_err(|e| Error::CaseInvalid(format!("{} {stage}: {e}", case.case_id)))?;
    }
    let dir_text = dir.display().to_string();
    for t in &mut case.provided_tools {
        t.body = t.body.replace(CASE_DIR_PLACEHOLDER, &dir_text);
        t.check()?;
    }
    case.dir = dir;
    Ok(case)
}

/// Every subdirectory of `dir` that holds a `case.json`, sorted by name.
pub fn load_cases(dir: &Path) -> Result<Vec<BenchCase>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CASE_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_case(d)).collect()
}

/// `|actual - expected| <= max(abs_tol, rel_tol * |expected|)`.
pub fn within_tolerance(actual: f64, expected: f64, rel_tol: f64, abs_tol: f64) -> bool {
    (actual - expected).abs() <= abs_tol.max(rel_tol * expected.abs())
}

/// What one node of the scored stage left behind.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeOutput {
    pub node_id: String,
    pub status: NodeStatus,
    pub dir: PathBuf,
    pub manifest: Option<ArtifactManifest>,
}

struct Found {
    kind: ArtifactKind,
    stats: ArtifactStats,
}

fn find_artifact(nodes: &[NodeOutput], name: &str) -> Option<Found> {
    for n in nodes {
        let Some(a) = n.manifest.as_ref().and_then(|m| m.artifact(name)) else {
            continue;
        };
        let path = a.resolve(&n.dir);
        let stats = if a.kind == ArtifactKind::Raster {
            read_ascii_grid(&path).ok().map(|g| g.stats.to_artifact_stats())
        } else {
            None
        };
        let stats = stats.or_else(|| a.stats.clone()).unwrap_or_default();
        return Some(Found { kind: a.kind, stats });
    }
    None
}

fn find_result<'a>(nodes: &'a [NodeOutput], key: &str) -> Option<&'a Value> {
    nodes.iter().find_map(|n| n.manifest.as_ref().and_then(|m| m.result(key)))
}

fn stat_value(stats: &ArtifactStats, field: &str) -> Option<f64> {
    match field {
        "min" => stats.min,
        "max" => stats.max,
        "mean" => stats.mean,
        "nodata_fraction" => stats.nodata_fraction,
        "rows" => stats.rows.map(|v| v as f64),
        "cols" => stats.cols.map(|v| v as f64),
        "bands" => stats.bands.map(|v| v as f64),
        _ => None,
    }
}

fn json_num(v: &Value) -> Option<f64> {
    v.as_f64().or_else(|| v.as_str().and_then(|s| s.trim().parse().ok()))
}

fn split_key(key: &str) -> (Option<&str>, &str) {
    match key.rsplit_once('.') {
        Some((a, f)) => (Some(a), f),
        None => (None, key),
    }
}

fn check_metadata(nodes: &[NodeOutput], key: &str, expected: &Value, reasons: &mut Vec<String>) {
    let (artifact, field) = split_key(key);
    if artifact == Some("results") || artifact.is_none() {
        match find_result(nodes, field) {
            None => reasons.push(format!("metadata mismatch for {key}: no such result")),
            Some(actual) => {
                let same = match (json_num(actual), expected.as_f64()) {
                    (Some(a), Some(e)) => within_tolerance(a, e, DEFAULT_REL_TOL, DEFAULT_ABS_TOL),
                    _ => actual == expected,
                };
                if !same {
                    reasons.push(format!("metadata mismatch for {key}: expected {expected}, got {actual}"));
                }
            }
        }
        return;
    }
    let artifact = artifact.unwrap_or_default();
    let Some(found) = find_artifact(nodes, artifact) else {
        reasons.push(format!("metadata mismatch for {key}: artifact {artifact} not in any manifest"));
        return;
    };
    let ok = match field {
        "crs" => found.stats.crs.as_deref().map(Value::from) == Some(expected.clone()),
        "kind" => serde_json::to_value(found.kind).ok().as_ref() == Some(expected),
        "rows" | "cols" | "bands" => stat_value(&found.stats, field) == expected.as_f64(),
        "range" => match expected.as_array().map(|a| a.iter().filter_map(Value::as_f64).collect::<Vec<_>>()) {
            Some(b) if b.len() == 2 => match (found.stats.min, found.stats.max) {
                (Some(lo), Some(hi)) => lo >= b[0] && hi <= b[1],
                _ => false,
            },
            _ => {
                reasons.push(format!("metadata key {key}: range must be [lo, hi]"));
                return;
            }
        },
        other => {
            reasons.push(format!("unsupported metadata field `{other}` in {key}"));
            return;
        }
    };
    if !ok {
        let actual = match field {
            "crs" => format!("{:?}", found.stats.crs),
            "kind" => format!("{:?}", found.kind),
            "range" => format!("[{:?}, {:?}]", found.stats.min, found.stats.max),
            f => format!("{:?}", stat_value(&found.stats, f)),
        };
        reasons.push(format!("metadata mismatch for {key}: expected {expected}, got {actual}"));
    }
}

fn numeric_actual(nodes: &[NodeOutput], key: &str, results_only: bool) -> std::result::Result<f64, String> {
    let (artifact, field) = split_key(key);
    let from_results = |k: &str| {
        find_result(nodes, k)
            .ok_or_else(|| format!("{key}: no such key-value result"))
            .and_then(|v| json_num(v).ok_or_else(|| format!("{key}: result {v} is not numeric")))
    };
    match artifact {
        None => from_results(field),
        Some("results") => from_results(field),
        Some(_) if results_only => from_results(key),
        Some(a) => {
            let found = find_artifact(nodes, a).ok_or_else(|| format!("{key}: artifact {a} not in any manifest"))?;
            stat_value(&found.stats, field).ok_or_else(|| format!("{key}: statistic unavailable"))
        }
    }
}

/// Scores one stage's outputs against its expectation. Returns the
/// failure reasons; the stage passes when there are none.
pub fn score_stage(stage: Stage, nodes: &[NodeOutput], expect: &StageExpectation) -> Vec<String> {
    let mut reasons = Vec::new();
    if nodes.is_empty() {
        reasons.push("no outputs: the stage never ran".to_string());
    }
    for n in nodes {
        match n.status {
            NodeStatus::Completed => {}
            NodeStatus::Failed => reasons.push(format!("node {} failed", n.node_id)),
            NodeStatus::Skipped => reasons.push(format!("node {} skipped after an upstream failure", n.node_id)),
        }
    }
    for rel in &expect.location_expect {
        let localized = crate::model::normalize_relative(rel).is_some_and(|r| nodes.iter().any(|n| n.dir.join(&r).exists()));
        if !localized {
            reasons.push(format!("not localized in designated storage: {rel}"));
        }
    }
    for (key, expected) in &expect.metadata_expect {
        check_metadata(nodes, key, expected, &mut reasons);
    }
    let results_only = stage == Stage::GeospatialAnalysis;
    if results_only
        && !expect.numeric_expect.is_empty()
        && !nodes
            .iter()
            .any(|n| n.manifest.as_ref().is_some_and(|m| m.results.as_ref().is_some_and(|r| !r.is_empty())))
    {
        reasons.push("results are not structured as key-value pairs in the manifest".into());
    }
    for n in &expect.numeric_expect {
        match numeric_actual(nodes, &n.key, results_only) {
            Ok(actual) if within_tolerance(actual, n.expected, n.rel_tol, n.abs_tol) => {}
            Ok(actual) => reasons.push(format!(
                "numeric mismatch for {}: expected {}, got {} (tolerance {})",
                n.key,
                n.expected,
                actual,
                n.abs_tol.max(n.rel_tol * n.expected.abs())
            )),
            Err(e) => reasons.push(format!("numeric mismatch for {e}")),
        }
    }
    reasons
}

mod duration_nanos {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_nanos() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_nanos(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub case_id: String,
    pub stage: Stage,
    pub passed: bool,
    pub fail_reasons: Vec<String>,
    pub debug_rounds: u32,
    #[serde(with = "duration_nanos", rename = "running_time_ns")]
    pub running_time: Duration,
}

impl StageResult {
    pub fn new(case_id: &str, stage: Stage, fail_reasons: Vec<String>) -> Self {
        StageResult {
            case_id: case_id.into(),
            stage,
            passed: fail_reasons.is_empty(),
            fail_reasons,
            debug_rounds: 0,
            running_time: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    StageWise,
    EndToEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub accuracy: f64,
    pub passed: usize,
    pub total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_debug_rounds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_debug_rounds: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_running_time_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: BenchMode,
    pub n_cases: usize,
    pub per_stage: BTreeMap<Stage, StageMetrics>,
    pub results: Vec<StageResult>,
}

/// Accuracy per stage; debug rounds and running time only for stage-wise
/// runs. Independent of the order of `results`.
pub fn build_report(mode: BenchMode, n_cases: usize, mut results: Vec<StageResult>) -> MetricsReport {
    results.sort_by(|a, b| a.case_id.cmp(&b.case_id).then(a.stage.cmp(&b.stage)));
    let mut per_stage = BTreeMap::new();
    for stage in Stage::ALL {
        let rs: Vec<&StageResult> = results.iter().filter(|r| r.stage == stage).collect();
        if rs.is_empty() {
            continue;
        }
        let total = rs.len();
        let passed = rs.iter().filter(|r| r.passed).count();
        let stage_wise = mode == BenchMode::StageWise;
        per_stage.insert(
            stage,
            StageMetrics {
                accuracy: passed as f64 / total as f64,
                passed,
                total,
                mean_debug_rounds: stage_wise
                    .then(|| rs.iter().map(|r| f64::from(r.debug_rounds)).sum::<f64>() / total as f64),
                max_debug_rounds: stage_wise.then(|| rs.iter().map(|r| r.debug_rounds).max().unwrap_or(0)),
                mean_running_time_secs: stage_wise
                    .then(|| rs.iter().map(|r| r.running_time.as_secs_f64()).sum::<f64>() / total as f64),
            },
        );
    }
    MetricsReport { mode, n_cases, per_stage, results }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

pub fn emit_report(report: &MetricsReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Text => Ok(text_table(report)),
    }
}

fn text_table(report: &MetricsReport) -> String {
    let mode = match report.mode {
        BenchMode::StageWise => "stage-wise",
        BenchMode::EndToEnd => "end-to-end",
    };
    let mut s = format!("mode: {mode}\ncases: {}\n\n", report.n_cases);
    match report.mode {
        BenchMode::StageWise => {
            let _ = writeln!(
                s,
                "{:<22} {:>10} {:>8} {:>11} {:>10} {:>12}",
                "stage", "accuracy", "passed", "mean_debug", "max_debug", "mean_time_s"
            );
            for (stage, m) in &report.per_stage {
                let _ = writeln!(
                    s,
                    "{:<22} {:>10.2} {:>8} {:>11.2} {:>10} {:>12.3}",
                    stage.as_str(),
                    m.accuracy * 100.0,
                    format!("{}/{}", m.passed, m.total),
                    m.mean_debug_rounds.unwrap_or(0.0),
                    m.max_debug_rounds.unwrap_or(0),
                    m.mean_running_time_secs.unwrap_or(0.0)
                );
            }
        }
        BenchMode::EndToEnd => {
            let _ = writeln!(s, "{:<22} {:>10} {:>8}", "stage", "accuracy", "passed");
            for (stage, m) in &report.per_stage {
                let _ = writeln!(
                    s,
                    "{:<22} {:>10.2} {:>8}",
                    stage.as_str(),
                    m.accuracy * 100.0,
                    format!("{}/{}", m.passed, m.total)
                );
            }
        }
    }
    let failures: Vec<&StageResult> = report.results.iter().filter(|r| !r.passed).collect();
    if !failures.is_empty() {
        s.push_str("\nfailures:\n");
        for r in failures {
            let _ = writeln!(s, "  {} {}: {}", r.case_id, r.stage, r.fail_reasons.join("; "));
        }
    }
    s
}

/// Writes `report.json` and `report.txt` into `out_dir`.
pub fn write_report(report: &MetricsReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (name, format) in [(REPORT_JSON, ReportFormat::Json), (REPORT_TEXT, ReportFormat::Text)] {
        let path = out_dir.join(name);
        std::fs::write(&path, emit_report(report, format)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Revision counts and node running time per stage, from a run's ledger.
/// A node's running time spans its `node_started` event to its last
/// event.
pub fn ledger_stage_metrics(events: &[LedgerEvent]) -> BTreeMap<Stage, (u32, Duration)> {
    let mut out: BTreeMap<Stage, (u32, Duration)> = BTreeMap::new();
    let mut spans: BTreeMap<(Stage, String), (u64, u64)> = BTreeMap::new();
    for e in events {
        let (Some(stage), Some(node)) = (e.stage, e.node_id()) else {
            continue;
        };
        if e.kind == EventKind::Revision {
            out.entry(stage).or_default().0 += 1;
        }
        let key = (stage, node.to_string());
        if e.kind == EventKind::NodeStarted {
            spans.insert(key, (e.ts_mono_ns, e.ts_mono_ns));
        } else if let Some(span) = spans.get_mut(&key) {
            span.1 = span.1.max(e.ts_mono_ns);
        }
    }
    for ((stage, _), (start, end)) in spans {
        out.entry(stage).or_default().1 += Duration::from_nanos(end - start);
    }
    out
}

fn stage_outputs(run: &TaskRun, stage: Option<Stage>) -> Vec<NodeOutput> {
    run.result
        .outcomes
        .iter()
        .filter(|o| stage.is_none_or(|s| o.stage == s))
        .map(|o| NodeOutput {
            node_id: o.node_id.clone(),
            status: o.status,
            dir: run.ws.nodes_dir().join(&o.node_id),
            manifest: o.record.as_ref().and_then(|r| r.manifest.clone()),
        })
        .collect()
}

/// Runs cases against the engine configuration. With the scripted backend
/// every run replays the case's own fixture file.
pub struct BenchRunner {
    pub cfg: EngineConfig,
    /// Catalog shared by all cases; case tools are added per case.
    pub catalog: Vec<CatalogEntry>,
    shared_backend: Option<Arc<dyn Backend>>,
}

impl BenchRunner {
    pub fn new(cfg: EngineConfig) -> Result<Self> {
        cfg.check()?;
        let shared_backend = match cfg.backend {
            BackendKind::Http => Some(cfg.build_backend()?),
            BackendKind::Scripted => None,
        };
        let catalog = cfg.load_retrieval()?.index.entries().to_vec();
        Ok(BenchRunner { cfg, catalog, shared_backend })
    }

    fn engine_for(&self, case: &BenchCase, stage: Option<Stage>) -> Result<Engine> {
        let backend = match &self.shared_backend {
            Some(b) => b.clone(),
            None => {
                let fixture = ScriptedFixture::load(&case.fixture_path(stage))?;
                Arc::new(ScriptedBackend::new(fixture)) as Arc<dyn Backend>
            }
        };
        let mut index = VectorIndex::default();
        index.add(self.catalog.clone())?;
        index.add(case.provided_tools.clone())?;
        Engine::new(self.cfg.clone(), backend, Retrieval::new(index))
    }

    /// Runs one task with the per-case wall-clock cap. The ledger of the
    /// run is loaded even when the run itself fails.
    fn run_capped(
        &self,
        engine: Engine,
        task: TaskInstruction,
        data: Vec<PathBuf>,
        run_id: String,
    ) -> (Result<TaskRun>, Vec<LedgerEvent>) {
        let runs = self.cfg.workspace_base.join("runs");
        let stale = runs.join(&run_id);
        if stale.exists() {
            log::info!("replacing previous bench run {}", stale.display());
            if let Err(e) = std::fs::remove_dir_all(&stale) {
                return (Err(Error::io(&stale, e)), Vec::new());
            }
        }
        let ws = match crate::model::create_workspace(&run_id, &self.cfg.workspace_base) {
            Ok(ws) => ws,
            Err(e) => return (Err(e), Vec::new()),
        };
        let ledger = ws.ledger().clone();
        let (tx, rx) = mpsc::channel();
        let worker_ws = ws.clone();
        std::thread::spawn(move || {
            let _ = tx.send(engine.run_in(worker_ws, &task, &data));
        });
        let cap = Duration::from_secs_f64(self.cfg.case_timeout_secs);
        let result = match rx.recv_timeout(cap) {
            Ok(r) => r,
            Err(_) => Err(Error::Config(format!("case exceeded the {}s wall-clock cap", cap.as_secs_f64()))),
        };
        let events = ledger.load().map(|l| l.events).unwrap_or_default();
        (result, events)
    }

    pub fn run_stage(&self, case: &BenchCase, stage: Stage) -> StageResult {
        let Some(expect) = case.stage_specs.get(&stage) else {
            return StageResult::new(&case.case_id, stage, vec!["no expectation for this stage".into()]);
        };
        let prepared = self
            .engine_for(case, Some(stage))
            .and_then(|engine| Ok((engine, case.inputs_for(stage)?)));
        let (engine, data) = match prepared {
            Ok(p) => p,
            Err(e) => return StageResult::new(&case.case_id, stage, vec![format!("engine error: {e}")]),
        };
        let task = case.instruction.clone().with_scope(StageScope::single(stage));
        let run_id = format!("{}-{}", case.case_id, stage.as_str());
        let (result, events) = self.run_capped(engine, task, data, run_id);
        let reasons = match &result {
            Ok(run) => score_stage(stage, &stage_outputs(run, None), expect),
            Err(e) => vec![format!("engine error: {e}")],
        };
        let (debug_rounds, running_time) = ledger_stage_metrics(&events)
            .values()
            .fold((0, Duration::ZERO), |acc, v| (acc.0 + v.0, acc.1 + v.1));
        StageResult { debug_rounds, running_time, ..StageResult::new(&case.case_id, stage, reasons) }
    }

    pub fn run_case_end_to_end(&self, case: &BenchCase) -> Vec<StageResult> {
        let run = self.engine_for(case, None).map(|engine| {
            self.run_capped(engine, case.instruction.clone(), case.inputs.clone(), format!("{}-e2e", case.case_id))
        });
        let (result, events) = match run {
            Ok(r) => r,
            Err(e) => (Err(e), Vec::new()),
        };
        let metrics = ledger_stage_metrics(&events);
        case.stage_specs
            .iter()
            .map(|(stage, expect)| {
                let reasons = match &result {
                    Ok(run) => score_stage(*stage, &stage_outputs(run, Some(*stage)), expect),
                    Err(e) => vec![format!("engine error: {e}")],
                };
                let (debug_rounds, running_time) = metrics.get(stage).copied().unwrap_or_default();
                StageResult { debug_rounds, running_time, ..StageResult::new(&case.case_id, *stage, reasons) }
            })
            .collect()
    }

    /// Each stage of each case in isolation, fed with that stage's
    /// ground-truth inputs.
    pub fn run_stage_wise(&self, cases: &[BenchCase]) -> MetricsReport {
        let results = cases
            .iter()
            .flat_map(|c| c.stages().into_iter().map(move |s| (c, s)))
            .map(|(c, s)| self.run_stage(c, s))
            .collect();
        build_report(BenchMode::StageWise, cases.len(), results)
    }

    /// The full pipeline per case; downstream stages consume the agent's
    /// own upstream outputs.
    pub fn run_end_to_end(&self, cases: &[BenchCase]) -> MetricsReport {
        let results = cases.iter().flat_map(|c| self.run_case_end_to_end(c)).collect();
        build_report(BenchMode::EndToEnd, cases.len(), results)
    }
}

pub fn run_stage_wise(cases: &[BenchCase], cfg: &EngineConfig) -> Result<MetricsReport> {
    Ok(BenchRunner::new(cfg.clone())?.run_stage_wise(cases))
}

pub fn run_end_to_end(cases: &[BenchCase], cfg: &EngineConfig) -> Result<MetricsReport> {
    Ok(BenchRunner::new(cfg.clone())?.run_end_to_end(cases))
}

/// Opens a finished run's workspace and reloads its ledger metrics.
pub fn run_metrics(ws: &Workspace) -> Result<BTreeMap<Stage, (u32, Duration)>> {
    Ok(ledger_stage_metrics(&ws.ledger().load()?.events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Artifact;
    use serde_json::json;

    fn results_node(dir: &Path, results: Value) -> NodeOutput {
        NodeOutput {
            node_id: "n3".into(),
            status: NodeStatus::Completed,
            dir: dir.to_path_buf(),
            manifest: Some(ArtifactManifest {
                artifacts: vec![Artifact { name: "results".into(), path: "results.json".into(), kind: ArtifactKind::Keyvalue, stats: None }],
                results: results.as_object().cloned(),
            }),
        }
    }

    fn numeric(key: &str, expected: f64) -> StageExpectation {
        StageExpectation {
            numeric_expect: vec![NumericExpect { key: key.into(), expected, rel_tol: 0.01, abs_tol: 1e-6 }],
            ..Default::default()
        }
    }

    #[test]
    fn tolerance_examples() {
        assert!(within_tolerance(0.4205, 0.42, 0.01, 1e-6));
        assert!(!within_tolerance(0.50, 0.42, 0.01, 1e-6));
        assert!(within_tolerance(0.0, 1e-7, 0.01, 1e-6));
    }

    #[test]
    fn numeric_results_pass_and_fail() {
        let tmp = tempfile::tempdir().unwrap();
        let n = results_node(tmp.path(), json!({"mean_ndvi": 0.4205}));
        assert!(score_stage(Stage::GeospatialAnalysis, &[n.clone()], &numeric("mean_ndvi", 0.42)).is_empty());
        let n = results_node(tmp.path(), json!({"mean_ndvi": 0.50}));
        let r = score_stage(Stage::GeospatialAnalysis, &[n], &numeric("mean_ndvi", 0.42));
        assert_eq!(r.len(), 1);
        assert!(r[0].starts_with("numeric mismatch"));
    }

    #[test]
    fn analysis_needs_key_value_results() {
        let tmp = tempfile::tempdir().unwrap();
        let n = results_node(tmp.path(), Value::Null);
        let r = score_stage(Stage::GeospatialAnalysis, &[n], &numeric("mean_ndvi", 0.42));
        assert!(r.iter().any(|m| m.contains("key-value")));
    }

    #[test]
    fn missing_location_fails() {
        let tmp = tempfile::tempdir().unwrap();
        let n = results_node(tmp.path(), json!({"a": 1}));
        let expect = StageExpectation { location_expect: vec!["ndvi.asc".into()], ..Default::default() };
        let r = score_stage(Stage::FeatureExtraction, &[n], &expect);
        assert_eq!(r, ["not localized in designated storage: ndvi.asc"]);
    }

    #[test]
    fn raster_metadata_is_read_from_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(
            tmp.path().join("ndvi.asc"),
            "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n0.2 0.6\n",
        )
        .unwrap();
        std::fs::write(tmp.path().join("ndvi.prj"), "EPSG:32650").unwrap();
        let n = NodeOutput {
            node_id: "n2".into(),
            status: NodeStatus::Completed,
            dir: tmp.path().to_path_buf(),
            manifest: Some(ArtifactManifest {
                artifacts: vec![Artifact { name: "ndvi".into(), path: "ndvi.asc".into(), kind: ArtifactKind::Raster, stats: None }],
                results: None,
            }),
        };
        let mut expect = numeric("ndvi.mean", 0.4);
        expect.metadata_expect = json!({"ndvi.crs": "EPSG:32650", "ndvi.rows": 1, "ndvi.cols": 2, "ndvi.range": [-1, 1]})
            .as_object()
            .cloned()
            .unwrap();
        assert!(score_stage(Stage::FeatureExtraction, &[n.clone()], &expect).is_empty());
        expect.metadata_expect.insert("ndvi.crs".into(), json!("EPSG:4326"));
        assert_eq!(score_stage(Stage::FeatureExtraction, &[n], &expect).len(), 1);
    }

    #[test]
    fn failed_or_absent_nodes_fail_the_stage() {
        let expect = numeric("x", 1.0);
        assert!(!score_stage(Stage::DataPreparation, &[], &expect).is_empty());
        let tmp = tempfile::tempdir().unwrap();
        let mut n = results_node(tmp.path(), json!({"x": 1.0}));
        n.status = NodeStatus::Skipped;
        assert!(!score_stage(Stage::DataPreparation, &[n], &expect).is_empty());
    }

    fn result(case: &str, stage: Stage, passed: bool, debug: u32) -> StageResult {
        StageResult {
            debug_rounds: debug,
            running_time: Duration::from_millis(10),
            ..StageResult::new(case, stage, if passed { vec![] } else { vec!["x".into()] })
        }
    }

    #[test]
    fn report_arithmetic_and_format() {
        let rs = vec![
            result("a", Stage::DataPreparation, true, 2),
            result("b", Stage::DataPreparation, true, 0),
            result("c", Stage::DataPreparation, false, 0),
            result("d", Stage::DataPreparation, true, 0),
        ];
        let r = build_report(BenchMode::StageWise, 4, rs.clone());
        let m = &r.per_stage[&Stage::DataPreparation];
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.mean_debug_rounds, Some(0.5));
        assert_eq!(m.max_debug_rounds, Some(2));
        let text = emit_report(&r, ReportFormat::Text).unwrap();
        assert!(text.contains("75.00"));
        assert_eq!(text.lines().filter(|l| l.starts_with("data_preparation")).count(), 1);
        let back: MetricsReport = serde_json::from_str(&emit_report(&r, ReportFormat::Json).unwrap()).unwrap();
        assert_eq!(back, r);
        let mut shuffled = rs;
        shuffled.reverse();
        assert_eq!(build_report(BenchMode::StageWise, 4, shuffled), r);
    }

    #[test]
    fn end_to_end_reports_accuracy_only() {
        let r = build_report(BenchMode::EndToEnd, 1, vec![result("a", Stage::FeatureExtraction, true, 3)]);
        let m = &r.per_stage[&Stage::FeatureExtraction];
        assert!(m.mean_debug_rounds.is_none() && m.max_debug_rounds.is_none() && m.mean_running_time_secs.is_none());
        let json = emit_report(&r, ReportFormat::Json).unwrap();
        assert!(!json.contains("mean_debug_rounds"));
    }

    #[test]
    fn empty_case_dir_loads_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(load_cases(tmp.path()).unwrap().is_empty());
    }

    #[test]
    fn dangling_input_is_case_invalid() {
        let tmp = tempfile::tempdir().unwrap();
        let case = json!({
            "case_id": "c1", "domain": "water",
            "instruction": {"id": "c1", "text": "map water"},
            "inputs": ["inputs/missing.asc"],
            "stage_specs": {}
        });
        std::fs::write(tmp.path().join(CASE_FILE), case.to_string()).unwrap();
        match load_case(tmp.path()) {
            Err(Error::CaseInvalid(m)) => assert!(m.contains("missing.asc")),
            other => panic!("{other:?}"),
        }
    }
}
