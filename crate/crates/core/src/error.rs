use std::path::PathBuf;

use thiserror::Error;

use crate::executor::NodeFailure;
use crate::planner::DagReport;
use crate::probe::ProbeAttempt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("run exists: {0}")]
    RunExists(PathBuf),

    #[error("corrupt ledger at line {line}: {message}")]
    CorruptLedger { line: usize, message: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("call budget exhausted ({used}/{max} calls)")]
    BudgetExhausted { used: usize, max: usize },

    #[error("backend unavailable after {attempts} attempts: {message}")]
    BackendUnavailable { attempts: u32, message: String },

    #[error("backend rejected request with status {status}: {body}")]
    BackendRejected { status: u16, body: String },

    #[error("scripted fixture exhausted for role {0}")]
    FixtureExhausted(String),

    #[error("template error: missing value for placeholder `{0}`")]
    Template(String),

    #[error("unknown template `{0}`")]
    UnknownTemplate(String),

    #[error("duplicate catalog entry `{0}`")]
    DuplicateEntry(String),

    #[error("online search unavailable: {0}")]
    SearchUnavailable(String),

    #[error("probe failed after {} attempts", .attempts.len())]
    ProbeFailed { attempts: Vec<ProbeAttempt> },

    #[error("planning failed: {0}")]
    PlanningFailed(String),

    #[error("workflow compilation failed: {}", .report.summary())]
    CompileFailed { report: DagReport },

    #[error("node `{}` failed after {} rounds", .0.node_id, .0.rounds)]
    NodeFailed(Box<NodeFailure>),

    #[error("sandbox misconfigured: {0}")]
    SandboxMisconfigured(String),

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid case: {0}")]
    CaseInvalid(String),

    #[error("invalid rule `{rule_id}`: {message}")]
    InvalidRule { rule_id: String, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
