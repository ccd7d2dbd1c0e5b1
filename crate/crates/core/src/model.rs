//! Shared domain types, the on-disk run layout and the append-only ledger.
//!
//! Layout of one run:
//!
//! ```text
//! <base>/runs/<run_id>/ledger.jsonl
//! <base>/runs/<run_id>/profile/
//! <base>/runs/<run_id>/nodes/<node_id>/
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const PROFILE_DIR: &str = "profile";
pub const NODES_DIR: &str = "nodes";

/// One of the three independently evaluated pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    DataPreparation,
    FeatureExtraction,
    GeospatialAnalysis,
}

impl Stage {
    pub const ALL: [Stage; 3] = [
        Stage::DataPreparation,
        Stage::FeatureExtraction,
        Stage::GeospatialAnalysis,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::DataPreparation => "data_preparation",
            Stage::FeatureExtraction => "feature_extraction",
            Stage::GeospatialAnalysis => "geospatial_analysis",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }

    /// Position in the pipeline, 0-based.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which part of the pipeline a task covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageScope {
    DataPreparation,
    FeatureExtraction,
    GeospatialAnalysis,
    FullPipeline,
}

impl StageScope {
    pub fn single(stage: Stage) -> Self {
        match stage {
            Stage::DataPreparation => StageScope::DataPreparation,
            Stage::FeatureExtraction => StageScope::FeatureExtraction,
            Stage::GeospatialAnalysis => StageScope::GeospatialAnalysis,
        }
    }

    pub fn stages(self) -> Vec<Stage> {
        match self {
            StageScope::DataPreparation => vec![Stage::DataPreparation],
            StageScope::FeatureExtraction => vec![Stage::FeatureExtraction],
            StageScope::GeospatialAnalysis => vec![Stage::GeospatialAnalysis],
            StageScope::FullPipeline => Stage::ALL.to_vec(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageScope::DataPreparation => "data_preparation",
            StageScope::FeatureExtraction => "feature_extraction",
            StageScope::GeospatialAnalysis => "geospatial_analysis",
            StageScope::FullPipeline => "full_pipeline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstruction {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_hint: Option<String>,
    #[serde(default = "default_scope")]
    pub stage_scope: StageScope,
}

fn default_scope() -> StageScope {
    StageScope::FullPipeline
}

impl TaskInstruction {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let task = TaskInstruction {
            id: id.into(),
            text: text.into(),
            domain_hint: None,
            stage_scope: StageScope::FullPipeline,
        };
        task.check()?;
        Ok(task)
    }

    pub fn with_scope(mut self, scope: StageScope) -> Self {
        self.stage_scope = scope;
        self
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain_hint = Some(domain.into());
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::Parameter("task text is empty".into()));
        }
        if self.id.trim().is_empty() {
            return Err(Error::Parameter("task id is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ProbeAttempt,
    PlanCandidate,
    PlanSelected,
    DagCompiled,
    NodeStarted,
    NodeSkipped,
    ToolCreated,
    Execution,
    Validation,
    Revision,
    StageDone,
    LlmCall,
    Search,
}

/// Wall-clock plus monotonic reading taken at the same instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timestamp {
    pub wall: DateTime<Utc>,
    pub mono_ns: u64,
}

impl Timestamp {
    pub fn now() -> Self {
        static ANCHOR: OnceLock<Instant> = OnceLock::new();
        let anchor = ANCHOR.get_or_init(Instant::now);
        Timestamp {
            wall: Utc::now(),
            mono_ns: anchor.elapsed().as_nanos() as u64,
        }
    }
}

/// One ledger line. `run_id` is not stored per line; it is implied by the
/// ledger file and filled in on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub seq: u64,
    #[serde(serialize_with = "ser_rfc3339", deserialize_with = "de_rfc3339")]
    pub ts_wall: DateTime<Utc>,
    pub ts_mono_ns: u64,
    pub stage: Option<Stage>,
    pub kind: EventKind,
    pub payload: Map<String, Value>,
    #[serde(skip)]
    pub run_id: String,
}

fn ser_rfc3339<S: Serializer>(ts: &DateTime<Utc>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&ts.to_rfc3339_opts(SecondsFormat::Nanos, true))
}

fn de_rfc3339<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DateTime<Utc>, D::Error> {
    let raw = String::deserialize(d)?;
    DateTime::parse_from_rfc3339(&raw)
        .map(|t| t.with_timezone(&Utc))
        .map_err(serde::de::Error::custom)
}

impl LedgerEvent {
    pub fn payload_str(&self, key: &str) -> Option<&str> {
        self.payload.get(key).and_then(Value::as_str)
    }

    pub fn node_id(&self) -> Option<&str> {
        self.payload_str("node_id")
    }
}

struct LedgerState {
    file: File,
    next_seq: u64,
}

/// Single-writer append-only JSON Lines ledger.
pub struct Ledger {
    path: PathBuf,
    run_id: String,
    state: Mutex<LedgerState>,
}

impl fmt::Debug for Ledger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ledger")
            .field("path", &self.path)
            .field("run_id", &self.run_id)
            .finish()
    }
}

impl Ledger {
    fn open(path: PathBuf, run_id: String) -> Result<Self> {
        let last = if path.exists() {
            read_ledger_file(&path, &run_id)?
                .events
                .last()
                .map(|e| e.seq)
                .unwrap_or(0)
        } else {
            0
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Ledger {
            path,
            run_id,
            state: Mutex::new(LedgerState {
                file,
                next_seq: last + 1,
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    /// Appends an event and returns its sequence number. The line is synced
    /// to disk before returning.
    pub fn append(
        &self,
        stage: Option<Stage>,
        kind: EventKind,
        payload: Map<String, Value>,
    ) -> Result<u64> {
        let mut state = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let ts = Timestamp::now();
        let event = LedgerEvent {
            seq: state.next_seq,
            ts_wall: ts.wall,
            ts_mono_ns: ts.mono_ns,
            stage,
            kind,
            payload,
            run_id: self.run_id.clone(),
        };
        let mut line = serde_json::to_string(&event)?;
        line.push('\n');
        state
            .file
            .write_all(line.as_bytes())
            .and_then(|_| state.file.sync_data())
            .map_err(|e| Error::io(&self.path, e))?;
        state.next_seq += 1;
        Ok(event.seq)
    }

    pub fn load(&self) -> Result<LedgerLoad> {
        read_ledger_file(&self.path, &self.run_id)
    }
}

/// Result of reading a ledger back; `torn_lines` counts a dropped partial
/// trailing record.
#[derive(Debug, Clone, Default)]
pub struct LedgerLoad {
    pub events: Vec<LedgerEvent>,
    pub torn_lines: usize,
}

fn read_ledger_file(path: &Path, run_id: &str) -> Result<LedgerLoad> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(LedgerLoad::default()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let last_content = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = LedgerLoad::default();
    for (idx, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LedgerEvent>(line) {
            Ok(mut ev) => {
                ev.run_id = run_id.to_string();
                out.events.push(ev);
            }
            Err(_) if Some(idx) == last_content => {
                log::warn!("dropping torn trailing ledger line {} in {}", idx + 1, path.display());
                out.torn_lines += 1;
            }
            Err(e) => {
                return Err(Error::CorruptLedger {
                    line: idx + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    out.events.sort_by_key(|e| e.seq);
    Ok(out)
}

/// Directory tree for one run plus its ledger.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub run_id: String,
    pub node_dirs: BTreeMap<String, PathBuf>,
    ledger: Arc<Ledger>,
}

fn check_component(kind: &str, id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Parameter(format!("invalid {kind} `{id}`")))
    }
}

/// Creates `base/runs/<run_id>/` with its `nodes/`, `profile/` and empty
/// ledger. Fails if the run directory already exists.
pub fn create_workspace(run_id: &str, base: &Path) -> Result<Workspace> {
    check_component("run id", run_id)?;
    let runs = base.join("runs");
    fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
    let root = runs.join(run_id);
    match fs::create_dir(&root) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            return Err(Error::RunExists(root))
        }
        Err(e) => return Err(Error::io(&root, e)),
    }
    for sub in [NODES_DIR, PROFILE_DIR] {
        let p = root.join(sub);
        fs::create_dir(&p).map_err(|e| Error::io(&p, e))?;
    }
    let ledger_path = root.join(LEDGER_FILE);
    File::create(&ledger_path).map_err(|e| Error::io(&ledger_path, e))?;
    Workspace::attach(root, run_id)
}

impl Workspace {
    /// Reopens an existing run; the ledger continues from its persisted
    /// maximum sequence number.
    pub fn open(run_id: &str, base: &Path) -> Result<Workspace> {
        check_component("run id", run_id)?;
        let root = base.join("runs").join(run_id);
        if !root.is_dir() {
            return Err(Error::io(
                &root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "run directory missing"),
            ));
        }
        let mut ws = Workspace::attach(root, run_id)?;
        let nodes = ws.root.join(NODES_DIR);
        if let Ok(rd) = fs::read_dir(&nodes) {
            for entry in rd.flatten() {
                if entry.path().is_dir() {
                    let id = entry.file_name().to_string_lossy().into_owned();
                    ws.node_dirs.insert(id, entry.path());
                }
            }
        }
        Ok(ws)
    }

    /// Opens the run rooted at `root` directly (`.../runs/<run_id>`).
    pub fn open_root(root: &Path) -> Result<Workspace> {
        let run_id = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Parameter(format!("not a run directory: {}", root.display())))?;
        let base = root
            .parent()
            .and_then(Path::parent)
            .ok_or_else(|| Error::Parameter(format!("not a run directory: {}", root.display())))?;
        Workspace::open(&run_id, base)
    }

    fn attach(root: PathBuf, run_id: &str) -> Result<Workspace> {
        let ledger = Ledger::open(root.join(LEDGER_FILE), run_id.to_string())?;
        Ok(Workspace {
            root,
            run_id: run_id.to_string(),
            node_dirs: BTreeMap::new(),
            ledger: Arc::new(ledger),
        })
    }

    pub fn ledger(&self) -> &Arc<Ledger> {
        &self.ledger
    }

    pub fn profile_dir(&self) -> PathBuf {
        self.root.join(PROFILE_DIR)
    }

    pub fn nodes_dir(&self) -> PathBuf {
        self.root.join(NODES_DIR)
    }

    /// Path of a node directory without creating it.
    pub fn node_path(&self, node_id: &str) -> Result<PathBuf> {
        check_component("node id", node_id)?;
        Ok(self.nodes_dir().join(node_id))
    }

    /// Creates (if needed) and records the directory for `node_id`.
    pub fn register_node(&mut self, node_id: &str) -> Result<PathBuf> {
        let dir = self.node_path(node_id)?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.node_dirs.insert(node_id.to_string(), dir.clone());
        Ok(dir)
    }

    /// Resolves a workspace-relative path, refusing anything that would
    /// leave the workspace root after normalization.
    pub fn resolve(&self, rel: &str) -> Result<PathBuf> {
        let normalized = normalize_relative(rel)
            .ok_or_else(|| Error::Parameter(format!("path escapes workspace: {rel}")))?;
        Ok(self.root.join(normalized))
    }

    pub fn append_event(
        &self,
        stage: Option<Stage>,
        kind: EventKind,
        payload: Map<String, Value>,
    ) -> Result<u64> {
        self.ledger.append(stage, kind, payload)
    }
}

/// Lexically normalizes a relative path. Returns `None` for absolute paths
/// or when `..` climbs above the starting point.
pub fn normalize_relative(rel: &str) -> Option<PathBuf> {
    let mut parts: Vec<&std::ffi::OsStr> = Vec::new();
    for comp in Path::new(rel).components() {
        match comp {
            Component::Normal(p) => parts.push(p),
            Component::CurDir => {}
            Component::ParentDir => {
                parts.pop()?;
            }
            Component::RootDir | Component::Prefix(_) => return None,
        }
    }
    Some(parts.iter().collect())
}

pub fn append_event(
    ws: &Workspace,
    stage: Option<Stage>,
    kind: EventKind,
    payload: Map<String, Value>,
) -> Result<u64> {
    ws.append_event(stage, kind, payload)
}

pub fn load_ledger(ws: &Workspace) -> Result<LedgerLoad> {
    ws.ledger.load()
}

/// Builds a JSON object from `key => value` pairs.
#[macro_export]
macro_rules! payload {
    () => { ::serde_json::Map::new() };
    ($($key:expr => $value:expr),+ $(,)?) => {{
        let mut map = ::serde_json::Map::new();
        $( map.insert(($key).to_string(), ::serde_json::json!($value)); )+
        map
    }};
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_workspace_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = create_workspace("r1", tmp.path()).unwrap();
        assert_eq!(ws.root, tmp.path().join("runs/r1"));
        assert!(ws.node_dirs.is_empty());
        assert!(ws.root.join("nodes").is_dir());
        assert!(ws.root.join("profile").is_dir());
        assert!(ws.root.join("ledger.jsonl").is_file());
    }

    #[test]
    fn duplicate_run_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        create_workspace("r1", tmp.path()).unwrap();
        let err = create_workspace("r1", tmp.path()).unwrap_err();
        assert!(matches!(err, Error::RunExists(_)));
        assert!(err.to_string().contains("run exists"));
    }

    #[test]
    fn runs_are_disjoint() {
        let tmp = tempfile::tempdir().unwrap();
        let a = create_workspace("a", tmp.path()).unwrap();
        let b = create_workspace("b", tmp.path()).unwrap();
        assert!(!a.root.starts_with(&b.root));
        assert!(!b.root.starts_with(&a.root));
    }

    #[test]
    fn sequence_numbers_are_dense() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = create_workspace("r", tmp.path()).unwrap();
        assert_eq!(ws.append_event(None, EventKind::Search, payload!()).unwrap(), 1);
        for expected in 2..=100 {
            let seq = ws
                .append_event(Some(Stage::DataPreparation), EventKind::Execution, payload!("i" => expected))
                .unwrap();
            assert_eq!(seq, expected);
        }
        let loaded = load_ledger(&ws).unwrap();
        assert_eq!(loaded.events.len(), 100);
        assert!(loaded.events.windows(2).all(|w| w[0].seq + 1 == w[1].seq));
        assert_eq!(loaded.events[0].run_id, "r");
    }

    #[test]
    fn append_after_reopen_continues() {
        let tmp = tempfile::tempdir().unwrap();
        {
            let ws = create_workspace("r", tmp.path()).unwrap();
            for _ in 0..3 {
                ws.append_event(None, EventKind::LlmCall, payload!()).unwrap();
            }
        }
        let ws = Workspace::open("r", tmp.path()).unwrap();
        assert_eq!(ws.append_event(None, EventKind::LlmCall, payload!()).unwrap(), 4);
    }

    #[test]
    fn empty_and_missing_ledgers() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = create_workspace("r", tmp.path()).unwrap();
        assert!(load_ledger(&ws).unwrap().events.is_empty());
        fs::remove_file(ws.root.join(LEDGER_FILE)).unwrap();
        assert!(ws.ledger().load().unwrap().events.is_empty());
    }

    #[test]
    fn torn_trailing_line_is_dropped() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = create_workspace("r", tmp.path()).unwrap();
        for i in 0..5 {
            ws.append_event(None, EventKind::Execution, payload!("i" => i)).unwrap();
        }
        let path = ws.root.join(LEDGER_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let cut = text.trim_end().len() - 10;
        fs::write(&path, &text[..cut]).unwrap();
        let loaded = load_ledger(&ws).unwrap();
        assert_eq!(loaded.events.len(), 4);
        assert_eq!(loaded.torn_lines, 1);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = create_workspace("r", tmp.path()).unwrap();
        ws.append_event(None, EventKind::Execution, payload!()).unwrap();
        {
            let mut f = OpenOptions::new().append(true).open(ws.root.join(LEDGER_FILE)).unwrap();
            writeln!(f, "{{not json").unwrap();
        }
        ws.append_event(None, EventKind::Execution, payload!()).unwrap();
        let err = load_ledger(&ws).unwrap_err();
        assert!(matches!(err, Error::CorruptLedger { line: 2, .. }));
    }

    #[test]
    fn ledger_line_schema() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = create_workspace("r", tmp.path()).unwrap();
        ws.append_event(Some(Stage::FeatureExtraction), EventKind::Revision, payload!("node_id" => "n1"))
            .unwrap();
        let line = fs::read_to_string(ws.root.join(LEDGER_FILE)).unwrap();
        let v: Value = serde_json::from_str(line.trim()).unwrap();
        let obj = v.as_object().unwrap();
        let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        assert_eq!(keys, ["seq", "ts_wall", "ts_mono_ns", "stage", "kind", "payload"]);
        assert_eq!(obj["stage"], "feature_extraction");
        assert_eq!(obj["kind"], "revision");
        assert!(DateTime::parse_from_rfc3339(obj["ts_wall"].as_str().unwrap()).is_ok());
    }

    #[test]
    fn node_paths_stay_inside_root() {
        let tmp = tempfile::tempdir().unwrap();
        let mut ws = create_workspace("r", tmp.path()).unwrap();
        assert!(ws.register_node("..").is_err());
        assert!(ws.register_node("a/b").is_err());
        let d = ws.register_node("n1").unwrap();
        assert!(d.starts_with(&ws.root));
        assert!(ws.resolve("nodes/n1/../../x").unwrap().starts_with(&ws.root));
        assert!(ws.resolve("nodes/../../x").is_err());
        assert!(ws.resolve("/etc/passwd").is_err());
    }

    #[test]
    fn empty_task_text_rejected() {
        assert!(TaskInstruction::new("t", "  ").is_err());
        let t = TaskInstruction::new("t", "compute ndvi").unwrap();
        assert_eq!(t.stage_scope, StageScope::FullPipeline);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn ledger_round_trip(values in proptest::collection::vec(0i64..1000, 0..40)) {
            let tmp = tempfile::tempdir().unwrap();
            let ws = create_workspace("p", tmp.path()).unwrap();
            for v in &values {
                ws.append_event(None, EventKind::Execution, payload!("v" => v)).unwrap();
            }
            let loaded = load_ledger(&ws).unwrap();
            let got: Vec<i64> = loaded.events.iter().map(|e| e.payload["v"].as_i64().unwrap()).collect();
            proptest::prop_assert_eq!(got, values);
        }

        #[test]
        fn normalized_paths_never_escape(parts in proptest::collection::vec(
            proptest::prop_oneof!["\\.\\.", "\\.", "[a-z]{1,3}"], 0..8)) {
            let rel = parts.join("/");
            if let Some(p) = normalize_relative(&rel) {
                proptest::prop_assert!(!p.components().any(|c| matches!(c, Component::ParentDir)));
            }
        }
    }
}
