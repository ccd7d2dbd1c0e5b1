//! Chat-completion gateway shared by all agent roles.
//!
//! Two backends sit behind [`Backend`]: [`ScriptedBackend`] replays canned
//! responses per role (deterministic, offline) and [`HttpBackend`] speaks the
//! OpenAI-compatible `/chat/completions` wire format with bounded retries.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::model::{EventKind, Ledger, Stage};
use crate::payload;

pub const DEFAULT_MAX_CALLS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    DataSummary,
    Planner,
    Workflow,
    Coder,
    Checker,
}

impl RoleTag {
    pub const ALL: [RoleTag; 5] = [
        RoleTag::DataSummary,
        RoleTag::Planner,
        RoleTag::Workflow,
        RoleTag::Coder,
        RoleTag::Checker,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::DataSummary => "data_summary",
            RoleTag::Planner => "planner",
            RoleTag::Workflow => "workflow",
            RoleTag::Coder => "coder",
            RoleTag::Checker => "checker",
        }
    }

    pub fn parse(s: &str) -> Option<RoleTag> {
        RoleTag::ALL.into_iter().find(|r| r.as_str() == s)
    }

    /// Planner candidates need diversity; everything else should repeat.
    pub fn default_temperature(self) -> f64 {
        match self {
            RoleTag::Planner => 0.7,
            _ => 0.0,
        }
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub speaker: Speaker,
    pub text: String,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Message { speaker: Speaker::System, text: text.into() }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Message { speaker: Speaker::User, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message { speaker: Speaker::Assistant, text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role_tag: RoleTag,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Ledger attribution only; never sent to the backend.
    #[serde(skip)]
    pub stage: Option<Stage>,
}

impl ChatRequest {
    pub fn new(role_tag: RoleTag, messages: Vec<Message>) -> Self {
        ChatRequest {
            role_tag,
            messages,
            temperature: role_tag.default_temperature(),
            max_output_tokens: 4096,
            stage: None,
        }
    }

    pub fn with_stage(mut self, stage: Option<Stage>) -> Self {
        self.stage = stage;
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::Parameter("chat request has no messages".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Parameter("temperature must be >= 0".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(Error::Parameter("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<Usage>,
    pub backend_id: String,
    pub latency: Duration,
    /// Transport retries spent before this response.
    pub retries: u32,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse>;
}

/// Canned responses keyed by role, as stored in a fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedFixture {
    pub queues: BTreeMap<RoleTag, Vec<String>>,
    #[serde(default = "default_strict")]
    pub strict: bool,
}

fn default_strict() -> bool {
    true
}

impl Default for ScriptedFixture {
    fn default() -> Self {
        ScriptedFixture { queues: BTreeMap::new(), strict: true }
    }
}

impl ScriptedFixture {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn push(&mut self, role: RoleTag, text: impl Into<String>) -> &mut Self {
        self.queues.entry(role).or_default().push(text.into());
        self
    }
}

/// Replays fixture responses FIFO per role. In non-strict mode an exhausted
/// queue keeps returning its last response.
pub struct ScriptedBackend {
    queues: Mutex<HashMap<RoleTag, VecDeque<String>>>,
    last: Mutex<HashMap<RoleTag, String>>,
    strict: bool,
}

impl ScriptedBackend {
    pub fn new(fixture: ScriptedFixture) -> Self {
        let queues = fixture
            .queues
            .into_iter()
            .map(|(role, q)| (role, q.into_iter().collect()))
            .collect();
        ScriptedBackend {
            queues: Mutex::new(queues),
            last: Mutex::new(HashMap::new()),
            strict: fixture.strict,
        }
    }

    pub fn remaining(&self, role: RoleTag) -> usize {
        self.queues
            .lock()
            .unwrap()
            .get(&role)
            .map_or(0, VecDeque::len)
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn send(&self, req: &ChatRequest) -> Result<ChatResponse> {
        let next = self
            .queues
            .lock()
            .unwrap()
            .get_mut(&req.role_tag)
            .and_then(VecDeque::pop_front);
        let text = match next {
            Some(t) => {
                self.last.lock().unwrap().insert(req.role_tag, t.clone());
                t
            }
            None if !self.strict => self
                .last
                .lock()
                .unwrap()
                .get(&req.role_tag)
                .cloned()
                .ok_or_else(|| Error::FixtureExhausted(req.role_tag.to_string()))?,
            None => return Err(Error::FixtureExhausted(req.role_tag.to_string())),
        };
        Ok(ChatResponse {
            text,
            usage: None,
            backend_id: self.id().to_string(),
            latency: Duration::ZERO,
            retries: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: u32,
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base_delay: Duration::from_secs(1),
            factor: 2,
            max_retries: 3,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * self.factor.saturating_pow(attempt.saturating_sub(1))
    }
}

fn is_transient(status: u16) -> bool {
    matches!(status, 408 | 425 | 429 | 500 | 502 | 503 | 504)
}

/// OpenAI-compatible chat-completions client.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(600)))
            .build()
            .into();
        HttpBackend {
            endpoint: endpoint.into(),
            api_key,
            model: model.into(),
            retry: RetryPolicy::default(),
            agent,
        }
    }

    /// Reads `GF_LLM_ENDPOINT`, `GF_LLM_API_KEY` and `GF_LLM_MODEL`.
    pub fn from_env(env: &BTreeMap<String, String>) -> Result<Self> {
        let endpoint = env
            .get("GF_LLM_ENDPOINT")
            .cloned()
            .ok_or_else(|| Error::Config("GF_LLM_ENDPOINT is not set".into()))?;
        let model = env.get("GF_LLM_MODEL").cloned().unwrap_or_else(|| "default".into());
        Ok(HttpBackend::new(endpoint, env.get("GF_LLM_API_KEY").cloned(), model))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }

    fn body(&self, req: &ChatRequest) -> Value {
        let messages: Vec<Value> = req
            .messages
            .iter()
            .map(|m| {
                let role = match m.speaker {
                    Speaker::System => "system",
                    Speaker::User => "user",
                    Speaker::Assistant => "assistant",
                };
                json!({ "role": role, "content": m.text })
            })
            .collect();
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        })
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        "http"
    }

    fn send(&self, req: &ChatRequest) -> Result<ChatResponse> {
        http_complete(self, req)
    }
}

/// One chat-completion round trip with exponential backoff on transient
/// failures.
pub fn http_complete(backend: &HttpBackend, req: &ChatRequest) -> Result<ChatResponse> {
    req.check()?;
    let url = backend.url();
    let body = serde_json::to_string(&backend.body(req))?;
    let started = Instant::now();
    let mut retries = 0u32;
    loop {
        let mut call = backend.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &backend.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let failure = match call.send(body.as_str()) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                if (200..300).contains(&status) {
                    let mut out = parse_completion(&text)?;
                    out.backend_id = backend.id().to_string();
                    out.latency = started.elapsed();
                    out.retries = retries;
                    return Ok(out);
                }
                if !is_transient(status) {
                    return Err(Error::BackendRejected {
                        status,
                        body: excerpt(&text, 512),
                    });
                }
                format!("status {status}: {}", excerpt(&text, 200))
            }
            Err(e) => e.to_string(),
        };
        if retries >= backend.retry.max_retries {
            return Err(Error::BackendUnavailable {
                attempts: retries + 1,
                message: failure,
            });
        }
        retries += 1;
        log::warn!("chat completion attempt {retries} failed ({failure}); retrying");
        std::thread::sleep(backend.retry.delay(retries));
    }
}

fn excerpt(text: &str, max: usize) -> String {
    text.chars().take(max).collect()
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

fn parse_completion(body: &str) -> Result<ChatResponse> {
    let wire: WireResponse = serde_json::from_str(body)?;
    let text = wire
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| Error::BackendUnavailable {
            attempts: 1,
            message: "response carried no choices".into(),
        })?;
    Ok(ChatResponse {
        text,
        usage: wire.usage.map(|u| Usage {
            prompt_tokens: u.prompt_tokens,
            output_tokens: u.completion_tokens,
        }),
        backend_id: String::new(),
        latency: Duration::ZERO,
        retries: 0,
    })
}

/// Per-run call budget. Reservation is atomic so concurrent callers never
/// overshoot `max_calls`.
#[derive(Debug)]
pub struct CallBudget {
    pub max_calls: usize,
    calls_used: AtomicUsize,
    pub per_role_caps: BTreeMap<RoleTag, usize>,
    per_role_used: Mutex<BTreeMap<RoleTag, usize>>,
}

impl CallBudget {
    pub fn new(max_calls: usize) -> Self {
        CallBudget {
            max_calls,
            calls_used: AtomicUsize::new(0),
            per_role_caps: BTreeMap::new(),
            per_role_used: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_role_cap(mut self, role: RoleTag, cap: usize) -> Self {
        self.per_role_caps.insert(role, cap);
        self
    }

    pub fn calls_used(&self) -> usize {
        self.calls_used.load(Ordering::SeqCst)
    }

    fn reserve(&self, role: RoleTag) -> Result<()> {
        let mut per_role = self.per_role_used.lock().unwrap();
        let used_by_role = per_role.get(&role).copied().unwrap_or(0);
        if let Some(&cap) = self.per_role_caps.get(&role) {
            if used_by_role >= cap {
                return Err(Error::BudgetExhausted { used: used_by_role, max: cap });
            }
        }
        self.calls_used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |used| {
                (used < self.max_calls).then_some(used + 1)
            })
            .map_err(|used| Error::BudgetExhausted { used, max: self.max_calls })?;
        per_role.insert(role, used_by_role + 1);
        Ok(())
    }
}

impl Default for CallBudget {
    fn default() -> Self {
        CallBudget::new(DEFAULT_MAX_CALLS)
    }
}

/// Prompt templates with `{{name}}` placeholders.
#[derive(Debug, Clone, Default)]
pub struct PromptLibrary {
    templates: BTreeMap<String, String>,
}

const BUILTIN_PROMPTS: &[(&str, &str)] = &[
    ("system_data_summary", include_str!("../prompts/system_data_summary.txt")),
    ("system_planner", include_str!("../prompts/system_planner.txt")),
    ("system_workflow", include_str!("../prompts/system_workflow.txt")),
    ("system_coder", include_str!("../prompts/system_coder.txt")),
    ("system_checker", include_str!("../prompts/system_checker.txt")),
    ("probe", include_str!("../prompts/probe.txt")),
    ("distill", include_str!("../prompts/distill.txt")),
    ("plan", include_str!("../prompts/plan.txt")),
    ("workflow", include_str!("../prompts/workflow.txt")),
    ("code", include_str!("../prompts/code.txt")),
    ("revise", include_str!("../prompts/revise.txt")),
    ("check", include_str!("../prompts/check.txt")),
    ("describe", include_str!("../prompts/describe.txt")),
];

impl PromptLibrary {
    pub fn builtin() -> Self {
        PromptLibrary {
            templates: BUILTIN_PROMPTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Overrides templates with every `<id>.txt` file found in `dir`.
    pub fn load_dir(mut self, dir: &Path) -> Result<Self> {
        let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in rd {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            self.templates.insert(id.to_string(), text);
        }
        Ok(self)
    }

    pub fn insert(&mut self, id: impl Into<String>, template: impl Into<String>) {
        self.templates.insert(id.into(), template.into());
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.templates.get(id).map(String::as_str)
    }

    pub fn render(&self, template_id: &str, context: &Map<String, Value>) -> Result<String> {
        let template = self
            .get(template_id)
            .ok_or_else(|| Error::UnknownTemplate(template_id.to_string()))?;
        render_template(template, context)
    }
}

/// Substitutes every `{{name}}` in one pass. Strings are inserted verbatim,
/// other JSON values in their compact serialization.
pub fn render_template(template: &str, context: &Map<String, Value>) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let Some(close) = after.find("}}") else {
            out.push_str(&rest[open..]);
            return Ok(out);
        };
        let name = after[..close].trim();
        match context.get(name) {
            Some(Value::String(s)) => out.push_str(s),
            Some(Value::Null) => {}
            Some(other) => out.push_str(&other.to_string()),
            None => return Err(Error::Template(name.to_string())),
        }
        rest = &after[close + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn render_prompt(
    library: &PromptLibrary,
    template_id: &str,
    context: &Map<String, Value>,
) -> Result<String> {
    library.render(template_id, context)
}

/// The per-run entry point every agent calls through.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    pub budget: CallBudget,
    prompts: Arc<PromptLibrary>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, budget: CallBudget, prompts: Arc<PromptLibrary>) -> Self {
        Gateway { backend, budget, prompts }
    }

    pub fn scripted(fixture: ScriptedFixture) -> Self {
        Gateway::new(
            Arc::new(ScriptedBackend::new(fixture)),
            CallBudget::default(),
            Arc::new(PromptLibrary::builtin()),
        )
    }

    pub fn with_budget(mut self, budget: CallBudget) -> Self {
        self.budget = budget;
        self
    }

    pub fn prompts(&self) -> &PromptLibrary {
        &self.prompts
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// Builds a two-message request from the role's system template and a
    /// rendered user template.
    pub fn request(
        &self,
        role: RoleTag,
        template_id: &str,
        context: &Map<String, Value>,
    ) -> Result<ChatRequest> {
        let system = self
            .prompts
            .render(&format!("system_{}", role.as_str()), &Map::new())?;
        let user = self.prompts.render(template_id, context)?;
        Ok(ChatRequest::new(role, vec![Message::system(system), Message::user(user)]))
    }

    pub fn complete(&self, req: &ChatRequest, ledger: Option<&Ledger>) -> Result<ChatResponse> {
        complete(self, req, ledger)
    }
}

pub fn complete(gw: &Gateway, req: &ChatRequest, ledger: Option<&Ledger>) -> Result<ChatResponse> {
    req.check()?;
    gw.budget.reserve(req.role_tag)?;
    let result = gw.backend.send(req);
    if let Some(ledger) = ledger {
        match &result {
            Ok(resp) => record_usage(req, resp, ledger)?,
            Err(err) => {
                ledger.append(
                    req.stage,
                    EventKind::LlmCall,
                    payload!(
                        "role_tag" => req.role_tag,
                        "messages" => req.messages,
                        "response" => Value::Null,
                        "error" => err.to_string(),
                        "usage" => Value::Null,
                    ),
                )?;
            }
        }
    }
    result
}

/// Appends one `llm_call` event carrying the exchange, usage and latency.
pub fn record_usage(req: &ChatRequest, resp: &ChatResponse, ledger: &Ledger) -> Result<()> {
    let usage = match resp.usage {
        Some(u) => json!({ "prompt_tokens": u.prompt_tokens, "output_tokens": u.output_tokens }),
        None => Value::Null,
    };
    ledger.append(
        req.stage,
        EventKind::LlmCall,
        payload!(
            "role_tag" => req.role_tag,
            "backend_id" => resp.backend_id,
            "messages" => req.messages,
            "response" => resp.text,
            "usage" => usage,
            "latency_ms" => resp.latency.as_millis() as u64,
            "retries" => resp.retries,
        ),
    )?;
    Ok(())
}

/// Pulls the first fenced code block out of a model response, or the whole
/// trimmed text when there is none.
pub fn extract_code(text: &str) -> String {
    match fenced_block(text) {
        Some(block) => block.to_string(),
        None => text.trim().to_string(),
    }
}

fn fenced_block(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let end = body.find("```").unwrap_or(body.len());
    Some(body[..end].trim_end_matches(['\n', '\r']))
}

/// Locates a JSON object in a model response: a fenced block if present,
/// otherwise the span from the first `{` to the last `}`.
pub fn extract_json(text: &str) -> Option<&str> {
    let scope = fenced_block(text).unwrap_or(text);
    let start = scope.find('{')?;
    let end = scope.rfind('}')?;
    (end > start).then(|| &scope[start..=end])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::create_workspace;

    fn fixture(role: RoleTag, items: &[&str]) -> ScriptedFixture {
        let mut f = ScriptedFixture::default();
        f.strict = true;
        for i in items {
            f.push(role, *i);
        }
        f
    }

    fn req(role: RoleTag) -> ChatRequest {
        ChatRequest::new(role, vec![Message::user("go")])
    }

    #[test]
    fn scripted_fifo_and_budget() {
        let gw = Gateway::scripted(fixture(RoleTag::Coder, &["A"]));
        assert_eq!(gw.budget.calls_used(), 0);
        let r = gw.complete(&req(RoleTag::Coder), None).unwrap();
        assert_eq!(r.text, "A");
        assert_eq!(gw.budget.calls_used(), 1);
    }

    #[test]
    fn scripted_order() {
        let gw = Gateway::scripted(fixture(RoleTag::Planner, &["x", "y"]));
        assert_eq!(gw.complete(&req(RoleTag::Planner), None).unwrap().text, "x");
        assert_eq!(gw.complete(&req(RoleTag::Planner), None).unwrap().text, "y");
    }

    #[test]
    fn zero_budget_never_reaches_backend() {
        let backend = Arc::new(ScriptedBackend::new(fixture(RoleTag::Coder, &["A"])));
        let gw = Gateway::new(backend.clone(), CallBudget::new(0), Arc::new(PromptLibrary::builtin()));
        let err = gw.complete(&req(RoleTag::Coder), None).unwrap_err();
        assert!(matches!(err, Error::BudgetExhausted { .. }));
        assert_eq!(backend.remaining(RoleTag::Coder), 1);
    }

    #[test]
    fn per_role_cap() {
        let mut f = fixture(RoleTag::Coder, &["a", "b"]);
        f.push(RoleTag::Checker, "c");
        let gw = Gateway::scripted(f).with_budget(CallBudget::new(10).with_role_cap(RoleTag::Coder, 1));
        gw.complete(&req(RoleTag::Coder), None).unwrap();
        assert!(gw.complete(&req(RoleTag::Coder), None).is_err());
        assert_eq!(gw.complete(&req(RoleTag::Checker), None).unwrap().text, "c");
    }

    #[test]
    fn strict_exhaustion_and_lenient_replay() {
        let gw = Gateway::scripted(fixture(RoleTag::Coder, &["A"]));
        gw.complete(&req(RoleTag::Coder), None).unwrap();
        assert!(matches!(
            gw.complete(&req(RoleTag::Coder), None),
            Err(Error::FixtureExhausted(_))
        ));
        let mut lenient = fixture(RoleTag::Coder, &["A", "B"]);
        lenient.strict = false;
        let gw = Gateway::scripted(lenient);
        for expected in ["A", "B", "B", "B"] {
            assert_eq!(gw.complete(&req(RoleTag::Coder), None).unwrap().text, expected);
        }
    }

    #[test]
    fn render_substitutes_and_reports_missing() {
        let ctx = payload!("x" => "EO");
        assert_eq!(render_template("hi {{x}}", &ctx).unwrap(), "hi EO");
        let err = render_template("hi {{y}}", &ctx).unwrap_err();
        assert!(matches!(err, Error::Template(ref n) if n == "y"));
        let a = render_template("{{x}} and {{ x }} {{n}}", &payload!("x" => "a", "n" => 3)).unwrap();
        let b = render_template("{{x}} and {{ x }} {{n}}", &payload!("x" => "a", "n" => 3)).unwrap();
        assert_eq!(a, "a and a 3");
        assert_eq!(a, b);
        // substituted values are never re-expanded
        assert_eq!(render_template("{{x}}", &payload!("x" => "{{x}}")).unwrap(), "{{x}}");
    }

    #[test]
    fn builtin_templates_exist_for_every_role() {
        let lib = PromptLibrary::builtin();
        for role in RoleTag::ALL {
            assert!(lib.get(&format!("system_{}", role.as_str())).is_some());
        }
    }

    #[test]
    fn usage_is_recorded_per_call() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = create_workspace("r", tmp.path()).unwrap();
        let resp = ChatResponse {
            text: "t".into(),
            usage: Some(Usage { prompt_tokens: 10, output_tokens: 5 }),
            backend_id: "http".into(),
            latency: Duration::from_millis(3),
            retries: 0,
        };
        record_usage(&req(RoleTag::Coder), &resp, ws.ledger()).unwrap();
        let no_usage = ChatResponse { usage: None, ..resp.clone() };
        record_usage(&req(RoleTag::Coder), &no_usage, ws.ledger()).unwrap();
        record_usage(&req(RoleTag::Coder), &no_usage, ws.ledger()).unwrap();
        let events = ws.ledger().load().unwrap().events;
        assert_eq!(events.len(), 3);
        assert_eq!(events[0].payload["usage"]["prompt_tokens"], 10);
        assert!(events[1].payload["usage"].is_null());
    }

    #[test]
    fn calls_used_matches_ledger_events() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = create_workspace("r", tmp.path()).unwrap();
        let gw = Gateway::scripted(fixture(RoleTag::Coder, &["a", "b"]));
        for _ in 0..3 {
            let _ = gw.complete(&req(RoleTag::Coder), Some(ws.ledger()));
        }
        let n = ws
            .ledger()
            .load()
            .unwrap()
            .events
            .iter()
            .filter(|e| e.kind == EventKind::LlmCall)
            .count();
        assert_eq!(n, gw.budget.calls_used());
    }

    #[test]
    fn code_and_json_extraction() {
        assert_eq!(extract_code("```python\nprint(1)\n```\nthanks"), "print(1)");
        assert_eq!(extract_code("  print(2)\n"), "print(2)");
        assert_eq!(extract_json("sure: {\"a\": {\"b\": 1}} done"), Some("{\"a\": {\"b\": 1}}"));
        assert_eq!(extract_json("```json\n{\"a\":1}\n```"), Some("{\"a\":1}"));
        assert_eq!(extract_json("nothing"), None);
    }

    #[test]
    fn fixture_file_schema() {
        let f: ScriptedFixture =
            serde_json::from_str(r#"{"queues":{"coder":["print(1)"],"planner":[]},"strict":true}"#).unwrap();
        assert!(f.strict);
        assert_eq!(f.queues[&RoleTag::Coder], vec!["print(1)".to_string()]);
    }

    #[test]
    fn retry_delays_double() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(1), Duration::from_secs(1));
        assert_eq!(p.delay(2), Duration::from_secs(2));
        assert_eq!(p.delay(3), Duration::from_secs(4));
    }
}
