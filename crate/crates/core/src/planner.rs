//! Planning: candidate plans from the planner role, similarity-based merge
//! and scoring into one selected plan, and compilation of that plan into a
//! validated workflow DAG.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::llm::{extract_json, ChatRequest, Gateway, Message, RoleTag};
use crate::model::{normalize_relative, EventKind, Ledger, Stage, StageScope, TaskInstruction, NODES_DIR};
use crate::payload;
use crate::probe::DataProfile;
use crate::retrieval::{cosine, Embedder, EmbeddingVector, HashEmbedder, Hit, Tier, VectorIndex};

pub const DEFAULT_CANDIDATES: usize = 3;
pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.85;
pub const DEFAULT_AVAILABILITY_WEIGHT: f64 = 0.6;
pub const DEFAULT_RIGOR_WEIGHT: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    #[serde(rename = "id")]
    pub step_id: String,
    pub description: String,
    #[serde(rename = "inputs", default)]
    pub required_inputs: Vec<String>,
    #[serde(rename = "outputs", default)]
    pub produced_outputs: Vec<String>,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePlan {
    pub plan_id: String,
    pub steps: Vec<PlanStep>,
    #[serde(default)]
    pub source_round: u32,
}

impl CandidatePlan {
    pub fn check(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Parameter(format!("plan {} has no steps", self.plan_id)));
        }
        let mut ids = BTreeSet::new();
        let mut outputs = BTreeSet::new();
        for s in &self.steps {
            if !ids.insert(s.step_id.as_str()) {
                return Err(Error::Parameter(format!("duplicate step id `{}`", s.step_id)));
            }
            if s.description.trim().is_empty() {
                return Err(Error::Parameter(format!("step `{}` has no description", s.step_id)));
            }
            for o in &s.produced_outputs {
                if !outputs.insert(o.as_str()) {
                    return Err(Error::Parameter(format!("output `{o}` is produced twice")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanScore {
    pub availability: f64,
    pub rigor: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedPlan {
    pub plan: CandidatePlan,
    pub score: PlanScore,
    pub merged_from: Vec<String>,
}

#[derive(Deserialize)]
struct PlanDoc {
    steps: Vec<PlanStep>,
}

/// Parses a plan document out of a model response.
pub fn parse_plan(text: &str, plan_id: &str, source_round: u32) -> Result<CandidatePlan> {
    let json = extract_json(text).ok_or_else(|| Error::Parameter("no JSON object in the response".into()))?;
    let doc: PlanDoc = serde_json::from_str(json)?;
    let plan = CandidatePlan { plan_id: plan_id.to_string(), steps: doc.steps, source_round };
    plan.check()?;
    Ok(plan)
}

fn render_hits(hits: &[Hit<'_>], with_body: bool) -> String {
    if hits.is_empty() {
        return "(none)".into();
    }
    let mut s = String::new();
    for h in hits {
        let _ = write!(s, "- [{}] {}: {}", h.entry.tier.as_str(), h.entry.entry_id, h.entry.description);
        if with_body && h.entry.body != h.entry.description {
            let _ = write!(s, "\n  {}", h.entry.body.replace('\n', "\n  "));
        }
        s.push('\n');
    }
    s.trim_end().to_string()
}

/// Asks the planner role for `n` independent plans. A response that does
/// not parse gets one re-ask carrying the parse error; a second failure
/// drops that candidate.
pub fn generate_candidate_plans(
    task: &TaskInstruction,
    profile: &DataProfile,
    knowledge_hits: &[Hit<'_>],
    tool_hits: &[Hit<'_>],
    n: usize,
    gateway: &Gateway,
    ledger: Option<&Ledger>,
) -> Result<Vec<CandidatePlan>> {
    if n == 0 {
        return Err(Error::Parameter("n must be positive".into()));
    }
    let ctx = payload!(
        "task" => task.text,
        "scope" => task.stage_scope.as_str(),
        "profile" => profile.context_text(),
        "knowledge" => render_hits(knowledge_hits, true),
        "tools" => render_hits(tool_hits, false),
        "feedback_section" => "",
    );
    let base = gateway.request(RoleTag::Planner, "plan", &ctx)?;
    let mut plans = Vec::new();
    let mut failures = Vec::new();
    for i in 1..=n {
        let plan_id = format!("p{i}");
        let mut req = base.clone();
        let mut parsed = None;
        for round in 1..=2u32 {
            let resp = gateway.complete(&req, ledger)?;
            match parse_plan(&resp.text, &plan_id, round) {
                Ok(plan) => {
                    parsed = Some(plan);
                    break;
                }
                Err(e) => {
                    if let Some(l) = ledger {
                        l.append(
                            None,
                            EventKind::PlanCandidate,
                            payload!("plan_id" => plan_id, "round" => round, "error" => e.to_string()),
                        )?;
                    }
                    failures.push(format!("{plan_id}: {e}"));
                    req = reask(req, &resp.text, &format!("That plan could not be parsed: {e}\nReply with the corrected JSON plan only."));
                }
            }
        }
        if let Some(plan) = parsed {
            if let Some(l) = ledger {
                l.append(None, EventKind::PlanCandidate, payload!("plan_id" => plan.plan_id, "plan" => plan))?;
            }
            plans.push(plan);
        }
    }
    if plans.is_empty() {
        return Err(Error::PlanningFailed(format!("no candidate plan could be parsed ({})", failures.join("; "))));
    }
    Ok(plans)
}

fn reask(mut req: ChatRequest, previous: &str, note: &str) -> ChatRequest {
    req.messages.push(Message::assistant(previous));
    req.messages.push(Message::user(note));
    req
}

/// Lowercased, punctuation-free, whitespace-collapsed description.
pub fn canonical_description(text: &str) -> String {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn step_vectors(plan: &CandidatePlan, embedder: &dyn Embedder) -> Vec<EmbeddingVector> {
    plan.steps
        .iter()
        .map(|s| embedder.embed(&canonical_description(&s.description)))
        .collect()
}

/// Greedy matching: repeatedly take the most similar unmatched pair
/// (ties by lower indices). Returns `(i, j, cosine)` triples.
fn greedy_pairs(a: &[EmbeddingVector], b: &[EmbeddingVector]) -> Vec<(usize, usize, f64)> {
    let mut all = Vec::with_capacity(a.len() * b.len());
    for (i, va) in a.iter().enumerate() {
        for (j, vb) in b.iter().enumerate() {
            all.push((i, j, cosine(va, vb)));
        }
    }
    all.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for (i, j, s) in all {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j, s));
        }
    }
    out
}

/// Mean cosine over greedily matched step pairs.
pub fn plan_similarity(a: &CandidatePlan, b: &CandidatePlan, embedder: &dyn Embedder) -> f64 {
    let pairs = greedy_pairs(&step_vectors(a, embedder), &step_vectors(b, embedder));
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64
}

/// Scores a plan against the data at hand.
pub trait PlanScorer {
    fn score(&self, plan: &CandidatePlan, profile: &DataProfile, external_tools: &[String]) -> PlanScore;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefaultScorer {
    pub availability_weight: f64,
    pub rigor_weight: f64,
}

impl Default for DefaultScorer {
    fn default() -> Self {
        DefaultScorer {
            availability_weight: DEFAULT_AVAILABILITY_WEIGHT,
            rigor_weight: DEFAULT_RIGOR_WEIGHT,
        }
    }
}

fn is_external_tool(name: &str, tools: &[String]) -> bool {
    tools.iter().any(|t| t.eq_ignore_ascii_case(name.trim()))
}

impl PlanScorer for DefaultScorer {
    fn score(&self, plan: &CandidatePlan, profile: &DataProfile, external_tools: &[String]) -> PlanScore {
        let produced: BTreeSet<&str> = plan
            .steps
            .iter()
            .flat_map(|s| s.produced_outputs.iter().map(String::as_str))
            .collect();
        let external: BTreeSet<&str> = plan
            .steps
            .iter()
            .flat_map(|s| s.required_inputs.iter().map(String::as_str))
            .filter(|i| !produced.contains(i))
            .collect();
        let resolvable = |name: &str| profile.resolve(name).is_some() || is_external_tool(name, external_tools);
        let availability = if external.is_empty() {
            1.0
        } else {
            external.iter().filter(|n| resolvable(n)).count() as f64 / external.len() as f64
        };

        let mut available: BTreeSet<&str> = BTreeSet::new();
        let mut rigorous = 0usize;
        for s in &plan.steps {
            if s.required_inputs.iter().all(|i| available.contains(i.as_str()) || resolvable(i)) {
                rigorous += 1;
            }
            available.extend(s.produced_outputs.iter().map(String::as_str));
        }
        let rigor = if plan.steps.is_empty() { 0.0 } else { rigorous as f64 / plan.steps.len() as f64 };
        PlanScore {
            availability,
            rigor,
            total: self.availability_weight * availability + self.rigor_weight * rigor,
        }
    }
}

pub struct AggregationConfig {
    pub merge_threshold: f64,
    pub scorer: Box<dyn PlanScorer + Send + Sync>,
    pub embedder: Box<dyn Embedder>,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            merge_threshold: DEFAULT_MERGE_THRESHOLD,
            scorer: Box::new(DefaultScorer::default()),
            embedder: Box::new(HashEmbedder),
        }
    }
}

impl AggregationConfig {
    pub fn with_weights(mut self, availability: f64, rigor: f64) -> Self {
        self.scorer = Box::new(DefaultScorer { availability_weight: availability, rigor_weight: rigor });
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.merge_threshold = threshold;
        self
    }
}

/// Ids of the catalog's external-command entries.
pub fn external_tool_ids(catalog: Option<&VectorIndex>) -> Vec<String> {
    catalog
        .map(|c| {
            c.entries()
                .iter()
                .filter(|e| e.tier == Tier::ExternalCommand)
                .map(|e| e.entry_id.clone())
                .collect()
        })
        .unwrap_or_default()
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut x = x;
    while parent[x] != r {
        let next = parent[x];
        parent[x] = r;
        x = next;
    }
    r
}

/// Merges one cluster (members in canonical order). Steps similar to an
/// already kept step are dropped, keeping the earlier position; steps whose
/// outputs collide with kept outputs are dropped; colliding step ids are
/// prefixed with their plan id.
fn merge_cluster(members: &[&CandidatePlan], threshold: f64, embedder: &dyn Embedder) -> CandidatePlan {
    struct Kept {
        step: PlanStep,
        vec: EmbeddingVector,
        position: usize,
        member: usize,
        index: usize,
    }
    let mut kept: Vec<Kept> = Vec::new();
    for (m, plan) in members.iter().enumerate() {
        for (idx, (step, vec)) in plan.steps.iter().zip(step_vectors(plan, embedder)).enumerate() {
            if m > 0 {
                let best = kept
                    .iter_mut()
                    .map(|k| {
                        let s = cosine(&k.vec, &vec);
                        (s, k)
                    })
                    .filter(|(s, _)| *s >= threshold)
                    .max_by(|a, b| a.0.total_cmp(&b.0));
                if let Some((_, k)) = best {
                    k.position = k.position.min(idx);
                    continue;
                }
                let collides = kept.iter().any(|k| {
                    k.step
                        .produced_outputs
                        .iter()
                        .any(|o| step.produced_outputs.contains(o))
                });
                if collides {
                    continue;
                }
            }
            let mut step = step.clone();
            if kept.iter().any(|k| k.step.step_id == step.step_id) {
                step.step_id = format!("{}.{}", plan.plan_id, step.step_id);
            }
            kept.push(Kept { step, vec, position: idx, member: m, index: idx });
        }
    }
    kept.sort_by_key(|k| (k.position, k.member, k.index));
    CandidatePlan {
        plan_id: members[0].plan_id.clone(),
        steps: kept.into_iter().map(|k| k.step).collect(),
        source_round: members[0].source_round,
    }
}

/// Merges similar candidates, scores each merged plan and returns the best.
/// The outcome does not depend on the order of `candidates`.
pub fn aggregate_plans(
    candidates: &[CandidatePlan],
    profile: &DataProfile,
    catalog: Option<&VectorIndex>,
    cfg: &AggregationConfig,
) -> Result<AggregatedPlan> {
    Ok(aggregate_all(candidates, profile, catalog, cfg)?.remove(0))
}

/// Every merged plan with its score, best first.
pub fn aggregate_all(
    candidates: &[CandidatePlan],
    profile: &DataProfile,
    catalog: Option<&VectorIndex>,
    cfg: &AggregationConfig,
) -> Result<Vec<AggregatedPlan>> {
    if candidates.is_empty() {
        return Err(Error::Parameter("no candidate plans to aggregate".into()));
    }
    let mut sorted: Vec<&CandidatePlan> = candidates.iter().collect();
    sorted.sort_by_cached_key(|p| (p.plan_id.clone(), serde_json::to_string(&p.steps).unwrap_or_default()));

    let vectors: Vec<Vec<EmbeddingVector>> = sorted.iter().map(|p| step_vectors(p, cfg.embedder.as_ref())).collect();
    let mut parent: Vec<usize> = (0..sorted.len()).collect();
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            let pairs = greedy_pairs(&vectors[i], &vectors[j]);
            let sim = if pairs.is_empty() {
                0.0
            } else {
                pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64
            };
            if sim >= cfg.merge_threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut clusters: BTreeMap<usize, Vec<&CandidatePlan>> = BTreeMap::new();
    for i in 0..sorted.len() {
        let root = find(&mut parent, i);
        clusters.entry(root).or_default().push(sorted[i]);
    }

    let tools = external_tool_ids(catalog);
    let mut out: Vec<AggregatedPlan> = clusters
        .into_values()
        .map(|members| {
            let plan = merge_cluster(&members, cfg.merge_threshold, cfg.embedder.as_ref());
            let score = cfg.scorer.score(&plan, profile, &tools);
            AggregatedPlan {
                plan,
                score,
                merged_from: members.iter().map(|m| m.plan_id.clone()).collect(),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total
            .total_cmp(&a.score.total)
            .then(a.plan.steps.len().cmp(&b.plan.steps.len()))
            .then(a.plan.plan_id.cmp(&b.plan.plan_id))
    });
    Ok(out)
}

/// One node input or output. `binding` is a path relative to the workspace
/// root (`nodes/<id>/<file>`) or an absolute path to an input datum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Port {
    pub name: String,
    #[serde(default)]
    pub kind: String,
    /// Output file name requested by the workflow role.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default)]
    pub binding: String,
}

impl Port {
    pub fn new(name: impl Into<String>, kind: impl Into<String>) -> Self {
        Port { name: name.into(), kind: kind.into(), file: None, binding: String::new() }
    }

    pub fn bound(mut self, binding: impl Into<String>) -> Self {
        self.binding = binding.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowNode {
    #[serde(rename = "id")]
    pub node_id: String,
    pub purpose: String,
    pub stage: Stage,
    #[serde(default)]
    pub inputs: Vec<Port>,
    #[serde(default)]
    pub outputs: Vec<Port>,
    #[serde(default)]
    pub params: Map<String, Value>,
}

impl WorkflowNode {
    pub fn output_dir(&self) -> String {
        format!("{NODES_DIR}/{}", self.node_id)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkflowDag {
    pub nodes: Vec<WorkflowNode>,
    pub edges: Vec<(String, String)>,
}

impl WorkflowDag {
    pub fn node(&self, id: &str) -> Option<&WorkflowNode> {
        self.nodes.iter().find(|n| n.node_id == id)
    }

    /// Direct predecessors of every node.
    pub fn parents(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut map: BTreeMap<&str, BTreeSet<&str>> =
            self.nodes.iter().map(|n| (n.node_id.as_str(), BTreeSet::new())).collect();
        for (u, v) in &self.edges {
            map.entry(v.as_str()).or_default().insert(u.as_str());
        }
        map
    }

    /// All transitive descendants of `id`.
    pub fn descendants(&self, id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id.to_string()];
        while let Some(cur) = stack.pop() {
            for (u, v) in &self.edges {
                if *u == cur && out.insert(v.clone()) {
                    stack.push(v.clone());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DagReport {
    pub violations: Vec<String>,
    /// Topological order, ties by node id; empty when the graph has a cycle.
    pub order: Vec<String>,
}

impl DagReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn summary(&self) -> String {
        if self.ok() {
            "ok".into()
        } else {
            self.violations.join("; ")
        }
    }
}

/// Kahn's algorithm with a sorted ready set. `None` when a cycle remains.
fn topological_order(ids: &BTreeSet<&str>, edges: &[(String, String)]) -> Option<Vec<String>> {
    let mut indegree: BTreeMap<&str, usize> = ids.iter().map(|&id| (id, 0)).collect();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (u, v) in edges {
        if ids.contains(u.as_str()) && ids.contains(v.as_str()) {
            *indegree.get_mut(v.as_str()).unwrap() += 1;
            succ.entry(u.as_str()).or_default().push(v.as_str());
        }
    }
    let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| id).collect();
    let mut order = Vec::with_capacity(ids.len());
    while let Some(id) = ready.pop_first() {
        order.push(id.to_string());
        for &v in succ.get(id).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indegree.get_mut(v).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(v);
            }
        }
    }
    (order.len() == ids.len()).then_some(order)
}

/// Finds one cycle among `ids` by walking predecessor links from the
/// smallest node that is still on a cycle.
fn describe_cycle(ids: &BTreeSet<&str>, edges: &[(String, String)]) -> String {
    let mut succ: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (u, v) in edges {
        if ids.contains(u.as_str()) && ids.contains(v.as_str()) {
            succ.entry(u.as_str()).or_default().insert(v.as_str());
        }
    }
    // Strip nodes that cannot lie on a cycle (no outgoing edge into the rest).
    let mut live: BTreeSet<&str> = ids.clone();
    loop {
        let dead: Vec<&str> = live
            .iter()
            .copied()
            .filter(|n| !succ.get(n).is_some_and(|s| s.iter().any(|v| live.contains(v))))
            .collect();
        if dead.is_empty() {
            break;
        }
        for d in dead {
            live.remove(d);
        }
    }
    let Some(&start) = live.first() else {
        return "cycle".into();
    };
    let mut path = vec![start];
    let mut seen: BTreeMap<&str, usize> = BTreeMap::from([(start, 0)]);
    let mut cur = start;
    loop {
        let next = *succ[cur].iter().find(|v| live.contains(*v)).unwrap();
        if let Some(&at) = seen.get(next) {
            let cycle = &path[at..];
            return if cycle.len() == 2 {
                format!("cycle: {}↔{}", cycle[0], cycle[1])
            } else {
                let mut s = String::from("cycle: ");
                for n in cycle {
                    s.push_str(n);
                    s.push('→');
                }
                s.push_str(cycle[0]);
                s
            };
        }
        seen.insert(next, path.len());
        path.push(next);
        cur = next;
    }
}

fn binding_owner(binding: &str) -> Option<&str> {
    let rest = binding.strip_prefix(NODES_DIR)?.strip_prefix('/')?;
    rest.split('/').next().filter(|s| !s.is_empty())
}

/// Structural checks on a DAG: unique ids, known edge endpoints,
/// acyclicity, unique port names, every input bound to an upstream output
/// or an input datum, and outputs bound inside the node's own directory.
pub fn validate_dag(dag: &WorkflowDag, profile: &DataProfile) -> DagReport {
    let mut violations = Vec::new();
    let mut ids = BTreeSet::new();
    for n in &dag.nodes {
        if !ids.insert(n.node_id.as_str()) {
            violations.push(format!("duplicate node id: {}", n.node_id));
        }
    }
    for (u, v) in &dag.edges {
        for end in [u, v] {
            if !ids.contains(end.as_str()) {
                violations.push(format!("edge {u}→{v} references unknown node {end}"));
            }
        }
    }
    let order = match topological_order(&ids, &dag.edges) {
        Some(o) => o,
        None => {
            violations.push(describe_cycle(&ids, &dag.edges));
            Vec::new()
        }
    };

    for n in &dag.nodes {
        let mut names = BTreeSet::new();
        for p in n.inputs.iter().chain(&n.outputs) {
            if !names.insert(p.name.as_str()) {
                violations.push(format!("node {} declares `{}` twice", n.node_id, p.name));
            }
        }
        let own_dir = format!("{}/", n.output_dir());
        for o in &n.outputs {
            let contained = normalize_relative(&o.binding)
                .map(|p| p.to_string_lossy().replace('\\', "/"))
                .is_some_and(|p| p.starts_with(&own_dir) && p.len() > own_dir.len());
            if !contained {
                violations.push(format!(
                    "output {} of {} is bound outside its node directory: {:?}",
                    o.name, n.node_id, o.binding
                ));
            }
        }
    }

    let ancestors = |id: &str| -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id.to_string()];
        while let Some(cur) = stack.pop() {
            for (u, v) in &dag.edges {
                if *v == cur && out.insert(u.clone()) {
                    stack.push(u.clone());
                }
            }
        }
        out
    };
    for n in &dag.nodes {
        let upstream = ancestors(&n.node_id);
        for i in &n.inputs {
            if i.binding.is_empty() {
                violations.push(format!("unbound input: {} (node {})", i.name, n.node_id));
                continue;
            }
            match binding_owner(&i.binding) {
                Some(owner) => {
                    let declared = dag
                        .node(owner)
                        .is_some_and(|p| p.outputs.iter().any(|o| o.binding == i.binding));
                    if !declared {
                        violations.push(format!("unbound input: {} (node {}) reads undeclared {}", i.name, n.node_id, i.binding));
                    } else if owner == n.node_id || !upstream.contains(owner) {
                        violations.push(format!(
                            "input {} of {} reads from {} which is not upstream",
                            i.name, n.node_id, owner
                        ));
                    }
                }
                None => {
                    if !profile.items.iter().any(|d| d.path == i.binding) {
                        violations.push(format!("unbound input: {} (node {}) is not an input datum", i.name, n.node_id));
                    }
                }
            }
        }
    }
    DagReport { violations, order }
}

#[derive(Deserialize)]
struct WorkflowDoc {
    nodes: Vec<WorkflowNode>,
}

/// Binds ports by name and derives edges: an input takes the output of
/// the single other node declaring that name, else a matching input datum.
pub fn bind_workflow(mut nodes: Vec<WorkflowNode>, profile: &DataProfile) -> WorkflowDag {
    for n in &mut nodes {
        let dir = n.output_dir();
        for o in &mut n.outputs {
            if o.binding.is_empty() {
                let file = o.file.clone().unwrap_or_else(|| o.name.clone());
                o.binding = format!("{dir}/{file}");
            }
        }
    }
    let producers: Vec<(String, String, String)> = nodes
        .iter()
        .flat_map(|n| n.outputs.iter().map(move |o| (n.node_id.clone(), o.name.clone(), o.binding.clone())))
        .collect();
    let mut edges = BTreeSet::new();
    for n in &mut nodes {
        for i in &mut n.inputs {
            if !i.binding.is_empty() {
                if let Some(owner) = binding_owner(&i.binding) {
                    edges.insert((owner.to_string(), n.node_id.clone()));
                }
                continue;
            }
            let matches: Vec<&(String, String, String)> =
                producers.iter().filter(|(id, name, _)| *id != n.node_id && *name == i.name).collect();
            if let [(owner, _, binding)] = matches.as_slice() {
                i.binding = binding.clone();
                edges.insert((owner.clone(), n.node_id.clone()));
            } else if matches.is_empty() {
                if let Some(item) = profile.resolve(&i.name) {
                    i.binding = item.path.clone();
                }
            }
        }
    }
    WorkflowDag { nodes, edges: edges.into_iter().collect() }
}

fn parse_workflow(text: &str, profile: &DataProfile) -> std::result::Result<WorkflowDag, String> {
    let json = extract_json(text).ok_or("no JSON object in the response")?;
    let doc: WorkflowDoc = serde_json::from_str(json).map_err(|e| e.to_string())?;
    Ok(bind_workflow(doc.nodes, profile))
}

/// One workflow-role call turning the plan into bound nodes, with one
/// repair re-ask when the result fails [`validate_dag`].
pub fn compile_workflow(
    plan: &AggregatedPlan,
    profile: &DataProfile,
    gateway: &Gateway,
    ledger: Option<&Ledger>,
) -> Result<WorkflowDag> {
    let plan_json = serde_json::to_string_pretty(&plan.plan.steps)?;
    let ctx = payload!("plan" => plan_json, "profile" => profile.context_text(), "feedback_section" => "");
    let mut req = gateway.request(RoleTag::Workflow, "workflow", &ctx)?;
    let mut last = DagReport::default();
    for round in 1..=2u32 {
        let resp = gateway.complete(&req, ledger)?;
        let (report, dag) = match parse_workflow(&resp.text, profile) {
            Ok(dag) => {
                let mut report = validate_dag(&dag, profile);
                if dag.nodes.is_empty() {
                    report.violations.push("workflow has no nodes".into());
                }
                (report, Some(dag))
            }
            Err(e) => (DagReport { violations: vec![format!("unparseable workflow: {e}")], order: vec![] }, None),
        };
        if let Some(l) = ledger {
            l.append(
                None,
                EventKind::DagCompiled,
                payload!("round" => round, "dag" => dag, "violations" => report.violations, "order" => report.order),
            )?;
        }
        if let (true, Some(dag)) = (report.ok(), dag) {
            return Ok(dag);
        }
        let note = format!(
            "The workflow is invalid:\n- {}\nReply with the corrected JSON workflow only.",
            report.violations.join("\n- ")
        );
        req = reask(req, &resp.text, &note);
        last = report;
    }
    Err(Error::CompileFailed { report: last })
}

/// The planner ablation: one node that does the whole task.
pub fn single_node_dag(task: &TaskInstruction, profile: &DataProfile) -> WorkflowDag {
    let stage = match task.stage_scope {
        StageScope::FullPipeline => Stage::GeospatialAnalysis,
        scope => *scope.stages().last().unwrap_or(&Stage::GeospatialAnalysis),
    };
    let node = WorkflowNode {
        node_id: "task".into(),
        purpose: task.text.clone(),
        stage,
        inputs: profile
            .items
            .iter()
            .map(|i| Port::new(i.stem(), i.modality.as_str()).bound(i.path.clone()))
            .collect(),
        outputs: vec![Port::new("results", "keyvalue").bound(format!("{NODES_DIR}/task/results.json"))],
        params: Map::new(),
    };
    WorkflowDag { nodes: vec![node], edges: Vec::new() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedFixture;
    use crate::probe::DataItem;

    fn step(id: &str, desc: &str, inputs: &[&str], outputs: &[&str]) -> PlanStep {
        PlanStep {
            step_id: id.into(),
            description: desc.into(),
            required_inputs: inputs.iter().map(|s| s.to_string()).collect(),
            produced_outputs: outputs.iter().map(|s| s.to_string()).collect(),
            stage: Stage::DataPreparation,
        }
    }

    fn plan(id: &str, steps: Vec<PlanStep>) -> CandidatePlan {
        CandidatePlan { plan_id: id.into(), steps, source_round: 1 }
    }

    fn profile(paths: &[&str]) -> DataProfile {
        DataProfile { items: paths.iter().map(|p| DataItem::bare(*p)).collect(), narrative: String::new() }
    }

    fn ndvi_plan(id: &str) -> CandidatePlan {
        plan(
            id,
            vec![
                step("s1", "clip red and nir bands", &["red", "nir"], &["clipped"]),
                step("s2", "compute ndvi", &["clipped"], &["ndvi"]),
            ],
        )
    }

    #[test]
    fn identical_candidates_merge_into_one() {
        let cands = vec![ndvi_plan("p1"), ndvi_plan("p2"), ndvi_plan("p3")];
        let agg = aggregate_plans(&cands, &profile(&["/d/red.asc", "/d/nir.asc"]), None, &AggregationConfig::default())
            .unwrap();
        assert_eq!(agg.plan.steps, cands[0].steps);
        assert_eq!(agg.merged_from, ["p1", "p2", "p3"]);
        assert_eq!(agg.score.availability, 1.0);
        assert_eq!(agg.score.rigor, 1.0);
        assert!((agg.score.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_candidate_is_returned_unchanged() {
        let p = ndvi_plan("p1");
        let agg = aggregate_plans(&[p.clone()], &profile(&["/d/red.asc"]), None, &AggregationConfig::default()).unwrap();
        assert_eq!(agg.plan, p);
        assert_eq!(agg.score.availability, 0.5);
        assert_eq!(agg.score.rigor, 0.5);
    }

    #[test]
    fn dissimilar_plans_stay_apart() {
        let a = ndvi_plan("p1");
        let b = plan("p2", vec![step("s1", "count night light pixels per district", &["lights"], &["counts"])]);
        let e = HashEmbedder;
        assert!(plan_similarity(&a, &b, &e) < DEFAULT_MERGE_THRESHOLD);
        let all = aggregate_all(&[a, b], &profile(&["/d/red.asc", "/d/nir.asc"]), None, &AggregationConfig::default())
            .unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].plan.plan_id, "p1");
    }

    #[test]
    fn tie_prefers_fewer_steps_then_id() {
        let long = plan("a", vec![step("s1", "alpha beta", &[], &["x"]), step("s2", "gamma delta", &[], &["y"])]);
        let short = plan("b", vec![step("s1", "night light epsilon", &[], &["z"])]);
        let best = aggregate_plans(&[long, short], &profile(&[]), None, &AggregationConfig::default()).unwrap();
        assert_eq!(best.plan.plan_id, "b");
    }

    #[test]
    fn external_commands_count_as_available() {
        use crate::retrieval::CatalogEntry;
        let mut idx = VectorIndex::default();
        idx.add(vec![CatalogEntry::new("segmenter", Tier::ExternalCommand, "segment", "seg {input} {output}")])
            .unwrap();
        let p = plan("p1", vec![step("s1", "segment buildings", &["scene", "segmenter"], &["mask"])]);
        let agg = aggregate_plans(&[p], &profile(&["/d/scene.asc"]), Some(&idx), &AggregationConfig::default())
            .unwrap();
        assert_eq!(agg.score.availability, 1.0);
    }

    #[test]
    fn merge_unions_distinct_steps() {
        let a = ndvi_plan("p1");
        let mut b = ndvi_plan("p2");
        b.steps.push(step("s3", "average ndvi over the farm polygons", &["ndvi"], &["stats"]));
        let cfg = AggregationConfig::default();
        assert!(plan_similarity(&a, &b, cfg.embedder.as_ref()) >= cfg.merge_threshold);
        let agg = aggregate_plans(&[b, a], &profile(&["/d/red.asc", "/d/nir.asc"]), None, &cfg).unwrap();
        assert_eq!(agg.merged_from, ["p1", "p2"]);
        let ids: Vec<&str> = agg.plan.steps.iter().map(|s| s.step_id.as_str()).collect();
        assert_eq!(ids, ["s1", "s2", "s3"]);
    }

    #[test]
    fn candidate_generation_reasks_then_drops() {
        let good = r#"{"steps":[{"id":"s1","description":"compute ndvi","inputs":["red"],"outputs":["ndvi"],"stage":"feature_extraction"}]}"#;
        let mut f = ScriptedFixture::default();
        for t in [good, "not json", "still not json", good] {
            f.push(RoleTag::Planner, t);
        }
        let gw = Gateway::scripted(f);
        let task = TaskInstruction::new("t", "ndvi").unwrap();
        let plans = generate_candidate_plans(&task, &profile(&[]), &[], &[], 3, &gw, None).unwrap();
        let ids: Vec<&str> = plans.iter().map(|p| p.plan_id.as_str()).collect();
        assert_eq!(ids, ["p1", "p3"]);
        assert_eq!(gw.budget.calls_used(), 4);
    }

    #[test]
    fn all_malformed_is_planning_failed() {
        let mut f = ScriptedFixture::default();
        f.strict = false;
        f.push(RoleTag::Planner, "{}");
        let gw = Gateway::scripted(f);
        let task = TaskInstruction::new("t", "ndvi").unwrap();
        let err = generate_candidate_plans(&task, &profile(&[]), &[], &[], 2, &gw, None).unwrap_err();
        assert!(matches!(err, Error::PlanningFailed(_)));
    }

    fn node(id: &str, inputs: &[&str], outputs: &[&str]) -> WorkflowNode {
        WorkflowNode {
            node_id: id.into(),
            purpose: id.into(),
            stage: Stage::DataPreparation,
            inputs: inputs.iter().map(|n| Port::new(*n, "raster")).collect(),
            outputs: outputs
                .iter()
                .map(|n| Port { file: Some(format!("{n}.asc")), ..Port::new(*n, "raster") })
                .collect(),
            params: Map::new(),
        }
    }

    #[test]
    fn empty_dag_is_valid() {
        let r = validate_dag(&WorkflowDag::default(), &profile(&[]));
        assert!(r.ok());
        assert!(r.order.is_empty());
    }

    #[test]
    fn two_cycle_is_named() {
        let dag = bind_workflow(vec![node("a", &["y"], &["x"]), node("b", &["x"], &["y"])], &profile(&[]));
        let r = validate_dag(&dag, &profile(&[]));
        assert!(r.violations.contains(&"cycle: a↔b".to_string()), "{:?}", r.violations);
    }

    #[test]
    fn longer_cycle_is_spelled_out() {
        let dag = WorkflowDag {
            nodes: vec![node("a", &[], &[]), node("b", &[], &[]), node("c", &[], &[]), node("d", &[], &[])],
            edges: vec![
                ("d".into(), "a".into()),
                ("a".into(), "b".into()),
                ("b".into(), "c".into()),
                ("c".into(), "a".into()),
            ],
        };
        let r = validate_dag(&dag, &profile(&[]));
        assert_eq!(r.violations, ["cycle: a→b→c→a"]);
    }

    #[test]
    fn linear_binding_and_order() {
        let p = profile(&["/d/red.asc"]);
        let dag = bind_workflow(
            vec![node("n3", &["b"], &["c"]), node("n1", &["red"], &["a"]), node("n2", &["a"], &["b"])],
            &p,
        );
        assert_eq!(dag.edges, [("n1".to_string(), "n2".to_string()), ("n2".to_string(), "n3".to_string())]);
        let r = validate_dag(&dag, &p);
        assert!(r.ok(), "{:?}", r.violations);
        assert_eq!(r.order, ["n1", "n2", "n3"]);
        assert_eq!(dag.node("n2").unwrap().inputs[0].binding, "nodes/n1/a.asc");
        assert_eq!(dag.node("n1").unwrap().inputs[0].binding, "/d/red.asc");
    }

    #[test]
    fn unbound_input_is_reported() {
        let dag = bind_workflow(vec![node("n1", &["ghost"], &["a"])], &profile(&[]));
        let r = validate_dag(&dag, &profile(&[]));
        assert!(r.violations.iter().any(|v| v.starts_with("unbound input: ghost")));
    }

    #[test]
    fn outputs_must_stay_in_node_dir() {
        let mut n = node("n1", &[], &["a"]);
        n.outputs[0].binding = "nodes/n2/a.asc".into();
        let r = validate_dag(&WorkflowDag { nodes: vec![n.clone()], edges: vec![] }, &profile(&[]));
        assert!(!r.ok());
        n.outputs[0].binding = "nodes/n1/../../x".into();
        let r = validate_dag(&WorkflowDag { nodes: vec![n], edges: vec![] }, &profile(&[]));
        assert!(!r.ok());
    }

    #[test]
    fn compile_repairs_on_second_round() {
        let cyclic = r#"{"nodes":[{"id":"a","purpose":"p","stage":"data_preparation","inputs":[{"name":"y","kind":"raster"}],"outputs":[{"name":"x","kind":"raster","file":"x.asc"}]},
                                  {"id":"b","purpose":"q","stage":"data_preparation","inputs":[{"name":"x","kind":"raster"}],"outputs":[{"name":"y","kind":"raster","file":"y.asc"}]}]}"#;
        let fixed = r#"{"nodes":[{"id":"a","purpose":"p","stage":"data_preparation","inputs":[{"name":"red","kind":"raster"}],"outputs":[{"name":"x","kind":"raster","file":"x.asc"}]},
                                 {"id":"b","purpose":"q","stage":"data_preparation","inputs":[{"name":"x","kind":"raster"}],"outputs":[{"name":"y","kind":"raster","file":"y.asc"}]}]}"#;
        let mut f = ScriptedFixture::default();
        f.push(RoleTag::Workflow, cyclic).push(RoleTag::Workflow, fixed);
        let gw = Gateway::scripted(f);
        let p = profile(&["/d/red.asc"]);
        let agg = aggregate_plans(&[ndvi_plan("p1")], &p, None, &AggregationConfig::default()).unwrap();
        let dag = compile_workflow(&agg, &p, &gw, None).unwrap();
        assert_eq!(dag.nodes.len(), 2);
        assert_eq!(dag.edges.len(), 1);
    }

    #[test]
    fn compile_failure_names_the_input() {
        let bad = r#"{"nodes":[{"id":"a","purpose":"p","stage":"data_preparation","inputs":[{"name":"elevation","kind":"raster"}],"outputs":[{"name":"x","kind":"raster"}]}]}"#;
        let mut f = ScriptedFixture::default();
        f.push(RoleTag::Workflow, bad).push(RoleTag::Workflow, bad);
        let gw = Gateway::scripted(f);
        let p = profile(&[]);
        let agg = aggregate_plans(&[ndvi_plan("p1")], &p, None, &AggregationConfig::default()).unwrap();
        match compile_workflow(&agg, &p, &gw, None) {
            Err(Error::CompileFailed { report }) => assert!(report.summary().contains("elevation")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_node_ablation_is_valid() {
        let p = profile(&["/d/red.asc", "/d/nir.asc"]);
        let task = TaskInstruction::new("t", "compute ndvi").unwrap();
        let dag = single_node_dag(&task, &p);
        assert!(validate_dag(&dag, &p).ok());
        assert_eq!(dag.nodes[0].inputs.len(), 2);
    }
}
