//! Composition of the agents into one task run, and the configuration that
//! drives it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::executor::{run_workflow, ExecutorConfig, NodeStatus, RunContext, RunResult};
use crate::llm::{Backend, CallBudget, Gateway, HttpBackend, PromptLibrary, ScriptedBackend, ScriptedFixture, DEFAULT_MAX_CALLS};
use crate::model::{create_workspace, EventKind, Stage, TaskInstruction, Workspace};
use crate::payload;
use crate::planner::{
    aggregate_plans, compile_workflow, generate_candidate_plans, single_node_dag, AggregatedPlan, AggregationConfig,
    WorkflowDag, DEFAULT_AVAILABILITY_WEIGHT, DEFAULT_CANDIDATES, DEFAULT_MERGE_THRESHOLD, DEFAULT_RIGOR_WEIGHT,
};
use crate::probe::{distill_profile, passthrough_profile, run_probe_loop, DataProfile, DEFAULT_PROBE_ATTEMPTS};
use crate::retrieval::{
    ingest_tree, online_search, CatalogEntry, Hit, Retrieval, Tier, VectorIndex, DEFAULT_KNOWLEDGE_K, DEFAULT_SCRIPT_K,
};
use crate::sandbox::{SandboxConfig, DEFAULT_INTERPRETER};

pub const SUMMARY_FILE: &str = "summary.json";
pub const PLAN_FILE: &str = "plan.json";
pub const DAG_FILE: &str = "dag.json";
pub const DATA_PROFILE_FILE: &str = "data_profile.json";
pub const WEB_RESULTS_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub backend: BackendKind,
    /// Scripted-backend fixture file.
    pub fixture: Option<PathBuf>,
    pub llm_endpoint: Option<String>,
    pub llm_model: String,
    #[serde(skip_serializing)]
    pub llm_api_key: Option<String>,
    pub max_calls: usize,
    /// Revisions allowed per node; a node gets `max_debug_rounds + 1` attempts.
    pub max_debug_rounds: u32,
    pub probe_attempts: u32,
    pub node_timeout_secs: f64,
    pub stage_timeout_secs: BTreeMap<Stage, f64>,
    /// Wall-clock cap per bench case.
    pub case_timeout_secs: f64,
    pub plan_candidates: usize,
    pub merge_threshold: f64,
    pub availability_weight: f64,
    pub rigor_weight: f64,
    pub disable_data_summary: bool,
    pub disable_planner: bool,
    pub disable_checker: bool,
    pub disable_knowledge: bool,
    pub disable_tools: bool,
    pub checker_focus: bool,
    pub parallel: bool,
    pub interpreter: String,
    /// Persisted index directory (as written by `geoflow index`).
    pub catalog_dir: Option<PathBuf>,
    /// Documents and `*.jsonl` catalogs ingested at startup.
    pub knowledge_dir: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    pub workspace_base: PathBuf,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            backend: BackendKind::Http,
            fixture: None,
            llm_endpoint: None,
            llm_model: "default".into(),
            llm_api_key: None,
            max_calls: DEFAULT_MAX_CALLS,
            max_debug_rounds: 9,
            probe_attempts: DEFAULT_PROBE_ATTEMPTS,
            node_timeout_secs: 300.0,
            stage_timeout_secs: BTreeMap::new(),
            case_timeout_secs: 900.0,
            plan_candidates: DEFAULT_CANDIDATES,
            merge_threshold: DEFAULT_MERGE_THRESHOLD,
            availability_weight: DEFAULT_AVAILABILITY_WEIGHT,
            rigor_weight: DEFAULT_RIGOR_WEIGHT,
            disable_data_summary: false,
            disable_planner: false,
            disable_checker: false,
            disable_knowledge: false,
            disable_tools: false,
            checker_focus: false,
            parallel: false,
            interpreter: DEFAULT_INTERPRETER.into(),
            catalog_dir: None,
            knowledge_dir: None,
            prompts_dir: None,
            workspace_base: PathBuf::from("."),
        }
    }
}

fn positive_secs(name: &str, v: f64) -> Result<Duration> {
    if v.is_finite() && v > 0.0 {
        Ok(Duration::from_secs_f64(v))
    } else {
        Err(Error::Config(format!("{name} must be a positive number of seconds")))
    }
}

impl EngineConfig {
    pub fn check(&self) -> Result<()> {
        if self.max_calls == 0 {
            return Err(Error::Config("max_calls must be positive".into()));
        }
        if self.probe_attempts == 0 {
            return Err(Error::Config("probe_attempts must be positive".into()));
        }
        if self.plan_candidates == 0 {
            return Err(Error::Config("plan_candidates must be positive".into()));
        }
        positive_secs("node_timeout_secs", self.node_timeout_secs)?;
        positive_secs("case_timeout_secs", self.case_timeout_secs)?;
        for (stage, secs) in &self.stage_timeout_secs {
            positive_secs(&format!("stage_timeout_secs.{stage}"), *secs)?;
        }
        if !(self.merge_threshold > 0.0 && self.merge_threshold <= 1.0) {
            return Err(Error::Config("merge_threshold must be in (0, 1]".into()));
        }
        if !(self.availability_weight >= 0.0 && self.rigor_weight >= 0.0) {
            return Err(Error::Config("score weights must be non-negative".into()));
        }
        if self.backend == BackendKind::Http && self.fixture.is_some() {
            return Err(Error::Config("a fixture file only applies to the scripted backend".into()));
        }
        Ok(())
    }

    pub fn executor_config(&self) -> ExecutorConfig {
        ExecutorConfig {
            max_rounds: self.max_debug_rounds.saturating_add(1),
            interpreter: self.interpreter.clone(),
            timeout: Duration::from_secs_f64(self.node_timeout_secs),
            stage_timeouts: self
                .stage_timeout_secs
                .iter()
                .map(|(s, v)| (*s, Duration::from_secs_f64(*v)))
                .collect(),
            disable_checker: self.disable_checker,
            checker_focus: self.checker_focus,
            disable_knowledge: self.disable_knowledge,
            disable_tools: self.disable_tools,
            script_k: DEFAULT_SCRIPT_K,
            knowledge_k: DEFAULT_KNOWLEDGE_K,
            parallel: self.parallel,
        }
    }

    pub fn aggregation_config(&self) -> AggregationConfig {
        AggregationConfig::default()
            .with_threshold(self.merge_threshold)
            .with_weights(self.availability_weight, self.rigor_weight)
    }

    /// The configured backend. Scripted runs need a fixture file.
    pub fn build_backend(&self) -> Result<Arc<dyn Backend>> {
        match self.backend {
            BackendKind::Scripted => {
                let path = self
                    .fixture
                    .as_ref()
                    .ok_or_else(|| Error::Config("the scripted backend needs a fixture file".into()))?;
                Ok(Arc::new(ScriptedBackend::new(ScriptedFixture::load(path)?)))
            }
            BackendKind::Http => {
                let endpoint = self
                    .llm_endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("the http backend needs llm_endpoint (GF_LLM_ENDPOINT)".into()))?;
                Ok(Arc::new(HttpBackend::new(endpoint, self.llm_api_key.clone(), self.llm_model.clone())))
            }
        }
    }

    pub fn prompt_library(&self) -> Result<PromptLibrary> {
        match &self.prompts_dir {
            Some(dir) => PromptLibrary::builtin().load_dir(dir),
            None => Ok(PromptLibrary::builtin()),
        }
    }

    /// Catalog index from `catalog_dir` plus anything under `knowledge_dir`.
    pub fn load_retrieval(&self) -> Result<Retrieval> {
        let mut index = match &self.catalog_dir {
            Some(dir) if dir.exists() => VectorIndex::load(dir, Arc::new(crate::retrieval::HashEmbedder))?,
            _ => VectorIndex::default(),
        };
        if let Some(dir) = &self.knowledge_dir {
            index.add(ingest_tree(dir, None, None)?)?;
        }
        Ok(Retrieval::new(index))
    }
}

/// Everything one task run produced.
#[derive(Debug, Clone)]
pub struct TaskRun {
    pub ws: Workspace,
    pub profile: DataProfile,
    pub plan: Option<AggregatedPlan>,
    pub dag: WorkflowDag,
    pub result: RunResult,
}

impl TaskRun {
    pub fn succeeded(&self) -> bool {
        self.result.all_completed()
    }
}

pub struct Engine {
    pub cfg: EngineConfig,
    backend: Arc<dyn Backend>,
    prompts: Arc<PromptLibrary>,
    pub retrieval: Retrieval,
}

impl Engine {
    pub fn new(cfg: EngineConfig, backend: Arc<dyn Backend>, retrieval: Retrieval) -> Result<Self> {
        cfg.check()?;
        let prompts = Arc::new(cfg.prompt_library()?);
        Ok(Engine { cfg, backend, prompts, retrieval })
    }

    pub fn from_config(cfg: EngineConfig) -> Result<Self> {
        cfg.check()?;
        let backend = cfg.build_backend()?;
        let retrieval = cfg.load_retrieval()?;
        Engine::new(cfg, backend, retrieval)
    }

    /// A gateway with a fresh call budget over the shared backend.
    pub fn gateway(&self) -> Gateway {
        Gateway::new(self.backend.clone(), CallBudget::new(self.cfg.max_calls), self.prompts.clone())
    }

    fn profile(&self, task: &TaskInstruction, data: &[PathBuf], gw: &Gateway, ws: &Workspace) -> Result<DataProfile> {
        if self.cfg.disable_data_summary {
            return passthrough_profile(data);
        }
        let sandbox = SandboxConfig::new(&ws.root, &ws.profile_dir())
            .with_interpreter(self.cfg.interpreter.clone())
            .with_timeout(Duration::from_secs_f64(self.cfg.node_timeout_secs));
        let (mut profile, _attempts) = run_probe_loop(task, data, gw, ws, &sandbox, self.cfg.probe_attempts)?;
        profile.narrative = distill_profile(&profile.items, Some(gw), Some(ws))?;
        Ok(profile)
    }

    fn plan(&self, task: &TaskInstruction, profile: &DataProfile, gw: &Gateway, ws: &Workspace) -> Result<(Option<AggregatedPlan>, WorkflowDag)> {
        if self.cfg.disable_planner {
            return Ok((None, single_node_dag(task, profile)));
        }
        let index = self.retrieval.index.as_ref();
        let query = task.text.as_str();
        let mut web_entries: Vec<CatalogEntry> = Vec::new();
        if !self.cfg.disable_knowledge {
            match online_search(self.retrieval.search.as_ref(), query, WEB_RESULTS_K, Some(ws.ledger())) {
                Ok(results) => {
                    web_entries = results
                        .into_iter()
                        .map(|r| CatalogEntry::new(r.url, Tier::KnowledgeChunk, r.title, r.snippet).with_provenance("web"))
                        .collect();
                }
                Err(e) => log::warn!("continuing without online knowledge: {e}"),
            }
        }
        let mut knowledge: Vec<Hit<'_>> = Vec::new();
        let mut tools: Vec<Hit<'_>> = Vec::new();
        if !index.is_empty() {
            if !self.cfg.disable_knowledge {
                knowledge = index.hits(query, DEFAULT_KNOWLEDGE_K, Some(Tier::KnowledgeChunk))?;
            }
            if !self.cfg.disable_tools {
                tools = index
                    .hits(query, index.len(), None)?
                    .into_iter()
                    .filter(|h| h.entry.tier != Tier::KnowledgeChunk)
                    .take(DEFAULT_SCRIPT_K)
                    .collect();
            }
        }
        let rank0 = knowledge.len();
        knowledge.extend(web_entries.iter().enumerate().map(|(i, e)| Hit { result_score: 0.0, rank: rank0 + i + 1, entry: e }));

        let ledger = Some(ws.ledger().as_ref());
        let candidates = generate_candidate_plans(task, profile, &knowledge, &tools, self.cfg.plan_candidates, gw, ledger)?;
        let plan = aggregate_plans(&candidates, profile, Some(index), &self.cfg.aggregation_config())?;
        ws.append_event(
            None,
            EventKind::PlanSelected,
            payload!("plan" => plan.plan, "score" => plan.score, "merged_from" => plan.merged_from),
        )?;
        let dag = compile_workflow(&plan, profile, gw, ledger)?;
        Ok((Some(plan), dag))
    }

    /// Probe → plan → compile → execute, in a fresh workspace under
    /// `workspace_base/runs/<run_id>`.
    pub fn run_task(&self, task: &TaskInstruction, data: &[PathBuf], run_id: &str) -> Result<TaskRun> {
        task.check()?;
        let ws = create_workspace(run_id, &self.cfg.workspace_base)?;
        self.run_in(ws, task, data)
    }

    pub fn run_in(&self, ws: Workspace, task: &TaskInstruction, data: &[PathBuf]) -> Result<TaskRun> {
        let gw = self.gateway();
        let profile = self.profile(task, data, &gw, &ws)?;
        write_json(&ws.profile_dir().join(DATA_PROFILE_FILE), &profile)?;
        let (plan, dag) = self.plan(task, &profile, &gw, &ws)?;
        if let Some(p) = &plan {
            write_json(&ws.root.join(PLAN_FILE), p)?;
        }
        write_json(&ws.root.join(DAG_FILE), &dag)?;
        let exec = self.cfg.executor_config();
        let ctx = RunContext { ws: &ws, profile: &profile, retrieval: &self.retrieval, gateway: &gw, cfg: &exec };
        let result = run_workflow(&dag, &ctx)?;
        let run = TaskRun { ws, profile, plan, dag, result };
        write_json(&run.ws.root.join(SUMMARY_FILE), &run_summary(task, &run, gw.budget.calls_used()))?;
        Ok(run)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn run_summary(task: &TaskInstruction, run: &TaskRun, llm_calls: usize) -> serde_json::Value {
    let nodes: Vec<serde_json::Value> = run
        .result
        .outcomes
        .iter()
        .map(|o| {
            json!({
                "node_id": o.node_id,
                "stage": o.stage,
                "status": o.status,
                "rounds": o.rounds,
                "debug_rounds": o.debug_rounds,
                "error": o.error,
                "artifacts": o.record.as_ref().and_then(|r| r.manifest.as_ref()).map(|m| m.artifacts.len()).unwrap_or(0),
            })
        })
        .collect();
    json!({
        "run_id": run.ws.run_id,
        "task": task,
        "success": run.succeeded(),
        "completed": run.result.outcomes.iter().filter(|o| o.status == NodeStatus::Completed).count(),
        "nodes": nodes,
        "llm_calls": llm_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = EngineConfig::default();
        cfg.check().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: EngineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.executor_config().max_rounds, 10);
    }

    #[test]
    fn invalid_budgets_are_rejected() {
        let cfg = EngineConfig { max_calls: 0, ..EngineConfig::default() };
        assert!(cfg.check().is_err());
        let cfg = EngineConfig { node_timeout_secs: 0.0, ..EngineConfig::default() };
        assert!(cfg.check().is_err());
        let cfg = EngineConfig { fixture: Some("f.json".into()), ..EngineConfig::default() };
        assert!(cfg.check().is_err());
    }

    #[test]
    fn scripted_backend_needs_fixture() {
        let cfg = EngineConfig { backend: BackendKind::Scripted, ..EngineConfig::default() };
        assert!(matches!(cfg.build_backend(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_config_keys_are_errors() {
        assert!(serde_json::from_str::<EngineConfig>(r#"{"frobnicate":1}"#).is_err());
    }
}
