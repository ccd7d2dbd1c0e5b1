//! Data summary: probe scripts that describe the input files, the retry
//! loop around them and the distilled data profile handed to the planner.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::llm::{extract_code, Gateway, RoleTag};
use crate::model::{EventKind, TaskInstruction, Workspace};
use crate::payload;
use crate::sandbox::{execute_script, ExecutionRecord, SandboxConfig, ToolScript};

pub const PROFILE_FILE: &str = "profile.json";
pub const DEFAULT_PROBE_ATTEMPTS: u32 = 5;
pub const PROBE_NODE_ID: &str = "probe";
pub const POINTERS_ENV: &str = "GF_DATA_POINTERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Multispectral,
    Sar,
    Ntl,
    Product,
    Tabular,
    Unknown,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Multispectral => "multispectral",
            Modality::Sar => "sar",
            Modality::Ntl => "ntl",
            Modality::Product => "product",
            Modality::Tabular => "tabular",
            Modality::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSummary {
    /// `None` when the band has no valid cell.
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
    pub nodata_fraction: f64,
}

/// One input file as described by a probe script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ItemDoc", into = "ItemDoc")]
pub struct DataItem {
    pub path: String,
    pub modality: Modality,
    pub rows: u64,
    pub cols: u64,
    pub bands: u64,
    pub crs: String,
    pub temporal: Option<(String, String)>,
    pub value_summary: Vec<BandSummary>,
    pub extra: Map<String, Value>,
}

/// The flat per-band-array layout of `profile.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ItemDoc {
    path: String,
    #[serde(default = "unknown_modality")]
    modality: Modality,
    #[serde(default)]
    rows: u64,
    #[serde(default)]
    cols: u64,
    #[serde(default)]
    bands: u64,
    #[serde(default)]
    crs: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    temporal: Option<(String, String)>,
    #[serde(default)]
    min: Vec<Option<f64>>,
    #[serde(default)]
    max: Vec<Option<f64>>,
    #[serde(default)]
    mean: Vec<Option<f64>>,
    #[serde(default)]
    nodata_fraction: Vec<f64>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    extra: Map<String, Value>,
}

fn unknown_modality() -> Modality {
    Modality::Unknown
}

impl From<ItemDoc> for DataItem {
    fn from(d: ItemDoc) -> Self {
        let n = d.min.len().max(d.max.len()).max(d.mean.len()).max(d.nodata_fraction.len());
        // Ragged arrays are kept ragged-as-NaN so `check` can reject them.
        let value_summary = (0..n)
            .map(|i| BandSummary {
                min: d.min.get(i).copied().flatten(),
                max: d.max.get(i).copied().flatten(),
                mean: d.mean.get(i).copied().flatten(),
                nodata_fraction: d.nodata_fraction.get(i).copied().unwrap_or(f64::NAN),
            })
            .collect();
        let mut extra = d.extra;
        if [d.min.len(), d.max.len(), d.mean.len(), d.nodata_fraction.len()]
            .iter()
            .any(|&len| len != n)
        {
            extra.insert("ragged_band_arrays".into(), Value::Bool(true));
        }
        DataItem {
            path: d.path,
            modality: d.modality,
            rows: d.rows,
            cols: d.cols,
            bands: d.bands,
            crs: d.crs,
            temporal: d.temporal,
            value_summary,
            extra,
        }
    }
}

impl From<DataItem> for ItemDoc {
    fn from(i: DataItem) -> Self {
        ItemDoc {
            path: i.path,
            modality: i.modality,
            rows: i.rows,
            cols: i.cols,
            bands: i.bands,
            crs: i.crs,
            temporal: i.temporal,
            min: i.value_summary.iter().map(|b| b.min).collect(),
            max: i.value_summary.iter().map(|b| b.max).collect(),
            mean: i.value_summary.iter().map(|b| b.mean).collect(),
            nodata_fraction: i.value_summary.iter().map(|b| b.nodata_fraction).collect(),
            extra: i.extra,
        }
    }
}

impl DataItem {
    /// An item that only knows its path.
    pub fn bare(path: impl Into<String>) -> Self {
        DataItem {
            path: path.into(),
            modality: Modality::Unknown,
            rows: 0,
            cols: 0,
            bands: 0,
            crs: String::new(),
            temporal: None,
            value_summary: Vec::new(),
            extra: Map::new(),
        }
    }

    pub fn file_name(&self) -> &str {
        Path::new(&self.path)
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or(&self.path)
    }

    pub fn stem(&self) -> &str {
        Path::new(&self.path)
            .file_stem()
            .and_then(|n| n.to_str())
            .unwrap_or(&self.path)
    }

    /// Whether a resource name in a plan or node refers to this file.
    pub fn matches(&self, name: &str) -> bool {
        let name = name.trim();
        name == self.path
            || name.eq_ignore_ascii_case(self.file_name())
            || name.eq_ignore_ascii_case(self.stem())
            || self
                .extra
                .get("name")
                .and_then(Value::as_str)
                .is_some_and(|n| n.eq_ignore_ascii_case(name))
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(format!("{}: {msg}", self.path)));
        if !Path::new(&self.path).exists() {
            return bad("path does not exist".into());
        }
        if self.extra.contains_key("ragged_band_arrays") {
            return bad("per-band arrays differ in length".into());
        }
        if self.bands > 0 && self.value_summary.len() as u64 != self.bands {
            return bad(format!(
                "{} band(s) declared but {} per-band summaries given",
                self.bands,
                self.value_summary.len()
            ));
        }
        for (i, b) in self.value_summary.iter().enumerate() {
            let band = i + 1;
            if !(0.0..=1.0).contains(&b.nodata_fraction) {
                return bad(format!("band {band}: nodata_fraction {} outside [0, 1]", b.nodata_fraction));
            }
            if let (Some(lo), Some(mean), Some(hi)) = (b.min, b.mean, b.max) {
                if !(lo <= mean && mean <= hi) {
                    return bad(format!("band {band}: expected min <= mean <= max, got {lo}, {mean}, {hi}"));
                }
            } else if b.nodata_fraction < 1.0 && (b.min.is_none() || b.max.is_none() || b.mean.is_none()) {
                return bad(format!("band {band}: has valid cells but missing min/max/mean"));
            }
        }
        Ok(())
    }

    fn describe(&self) -> String {
        let mut s = format!(
            "{} ({}): {} rows x {} cols, {} band(s), crs {}",
            self.file_name(),
            self.modality.as_str(),
            self.rows,
            self.cols,
            self.bands,
            if self.crs.is_empty() { "unknown" } else { &self.crs }
        );
        if let Some((start, end)) = &self.temporal {
            let _ = write!(s, ", time {start} to {end}");
        }
        for (i, b) in self.value_summary.iter().enumerate() {
            match (b.min, b.max, b.mean) {
                (Some(lo), Some(hi), Some(mean)) => {
                    let _ = write!(s, "; band {} range [{lo}, {hi}] mean {mean}", i + 1);
                }
                _ => {
                    let _ = write!(s, "; band {} has no valid values", i + 1);
                }
            }
            if b.nodata_fraction > 0.0 {
                let _ = write!(s, " nodata {:.2}%", b.nodata_fraction * 100.0);
            }
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataProfile {
    pub items: Vec<DataItem>,
    #[serde(default)]
    pub narrative: String,
}

impl DataProfile {
    pub fn resolve(&self, name: &str) -> Option<&DataItem> {
        self.items.iter().find(|i| i.matches(name))
    }

    /// Text handed to the planning and coding prompts.
    pub fn context_text(&self) -> String {
        let mut s = self.narrative.trim().to_string();
        if !s.is_empty() {
            s.push_str("\n\n");
        }
        s.push_str("Files:");
        for item in &self.items {
            let _ = write!(s, "\n- {} -> {}", item.stem(), item.path);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeOutcome {
    Parsed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeAttempt {
    pub round: u32,
    pub script: ToolScript,
    pub record: ExecutionRecord,
    pub outcome: ProbeOutcome,
    /// Why the attempt failed; `None` for parsed attempts.
    pub detail: Option<String>,
}

fn pointer_list(pointers: &[PathBuf]) -> String {
    pointers
        .iter()
        .map(|p| format!("- {}", p.display()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Asks the data summary role for a probe script.
pub fn generate_probe_script(
    task: &TaskInstruction,
    data_pointers: &[PathBuf],
    gateway: &Gateway,
    prior_feedback: Option<&str>,
    round: u32,
    ws: Option<&Workspace>,
) -> Result<ToolScript> {
    if data_pointers.is_empty() {
        return Err(Error::Parameter("no data pointers to probe".into()));
    }
    let feedback_section = match prior_feedback {
        Some(f) => format!("\nThe previous probe script failed:\n{f}\nFix the problem in the new script.\n"),
        None => String::new(),
    };
    let ctx = payload!(
        "task" => task.text,
        "pointers" => pointer_list(data_pointers),
        "feedback_section" => feedback_section,
    );
    let req = gateway.request(RoleTag::DataSummary, "probe", &ctx)?;
    let resp = gateway.complete(&req, ws.map(|w| w.ledger().as_ref()))?;
    Ok(ToolScript {
        node_id: PROBE_NODE_ID.into(),
        round,
        body: extract_code(&resp.text),
        interpreter: String::new(),
        references: Vec::new(),
    })
}

#[derive(Deserialize)]
struct ProfileDoc {
    items: Vec<DataItem>,
}

/// Reads and re-validates a probe's `profile.json`.
pub fn read_profile_items(path: &Path) -> Result<Vec<DataItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ProfileDoc = serde_json::from_str(&text)?;
    if doc.items.is_empty() {
        return Err(Error::Parameter("profile.json lists no items".into()));
    }
    for item in &doc.items {
        item.check()?;
    }
    Ok(doc.items)
}

fn attempt_failure(record: &ExecutionRecord, profile_path: &Path) -> std::result::Result<Vec<DataItem>, String> {
    if !record.succeeded() {
        return Err(record
            .traceback
            .clone()
            .unwrap_or_else(|| format!("exit status {}", record.exit_status)));
    }
    if !profile_path.exists() {
        return Err("the script finished but did not write profile.json".into());
    }
    read_profile_items(profile_path).map_err(|e| format!("profile.json rejected: {e}"))
}

/// Generates, runs and re-generates probe scripts until one produces a
/// valid `profile.json`, for at most `max_attempts` rounds. The narrative is
/// left empty; see [`distill_profile`].
pub fn run_probe_loop(
    task: &TaskInstruction,
    data_pointers: &[PathBuf],
    gateway: &Gateway,
    ws: &Workspace,
    sandbox: &SandboxConfig,
    max_attempts: u32,
) -> Result<(DataProfile, Vec<ProbeAttempt>)> {
    if max_attempts == 0 {
        return Err(Error::Parameter("max_attempts must be positive".into()));
    }
    if data_pointers.is_empty() {
        return Err(Error::Parameter("no data pointers to probe".into()));
    }
    let mut pointers = Vec::with_capacity(data_pointers.len());
    for p in data_pointers {
        pointers.push(p.canonicalize().map_err(|e| Error::io(p, e))?);
    }
    let env_value = pointers
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join("\n");
    let profile_dir = ws.profile_dir();
    let cfg = sandbox.for_workdir(&profile_dir).with_env(POINTERS_ENV, env_value);
    let profile_path = profile_dir.join(PROFILE_FILE);

    let mut attempts = Vec::new();
    let mut feedback: Option<String> = None;
    for round in 1..=max_attempts {
        let mut script = generate_probe_script(task, &pointers, gateway, feedback.as_deref(), round, Some(ws))?;
        script.interpreter = cfg.interpreter.clone();
        if profile_path.exists() {
            std::fs::remove_file(&profile_path).map_err(|e| Error::io(&profile_path, e))?;
        }
        let record = execute_script(&script, &cfg)?;
        let result = attempt_failure(&record, &profile_path);
        let (outcome, detail) = match &result {
            Ok(_) => (ProbeOutcome::Parsed, None),
            Err(d) => (ProbeOutcome::Failed, Some(d.clone())),
        };
        ws.append_event(
            None,
            EventKind::ProbeAttempt,
            payload!(
                "node_id" => PROBE_NODE_ID,
                "round" => round,
                "outcome" => outcome,
                "exit_status" => record.exit_status,
                "timed_out" => record.timed_out,
                "detail" => detail,
            ),
        )?;
        attempts.push(ProbeAttempt { round, script, record, outcome, detail: detail.clone() });
        if let Ok(items) = result {
            return Ok((DataProfile { items, narrative: String::new() }, attempts));
        }
        feedback = detail;
    }
    Err(Error::ProbeFailed { attempts })
}

/// Deterministic narrative used when no model is involved.
pub fn template_narrative(items: &[DataItem]) -> String {
    items.iter().map(DataItem::describe).collect::<Vec<_>>().join("\n")
}

/// One model call summarizing the items; with `gateway = None` (data
/// summary ablation) the deterministic template is used instead.
pub fn distill_profile(items: &[DataItem], gateway: Option<&Gateway>, ws: Option<&Workspace>) -> Result<String> {
    if items.is_empty() {
        return Err(Error::Parameter("cannot distill an empty profile".into()));
    }
    let Some(gw) = gateway else {
        return Ok(template_narrative(items));
    };
    let req = gw.request(RoleTag::DataSummary, "distill", &payload!("items" => template_narrative(items)))?;
    let resp = gw.complete(&req, ws.map(|w| w.ledger().as_ref()))?;
    let text = resp.text.trim().to_string();
    Ok(if text.is_empty() { template_narrative(items) } else { text })
}

/// Profile used when the data summary agent is switched off: paths only.
pub fn passthrough_profile(data_pointers: &[PathBuf]) -> Result<DataProfile> {
    let mut items = Vec::new();
    for p in data_pointers {
        let abs = p.canonicalize().map_err(|e| Error::io(p, e))?;
        items.push(DataItem::bare(abs.display().to_string()));
    }
    let narrative = items
        .iter()
        .map(|i| format!("{} (not inspected)", i.file_name()))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(DataProfile { items, narrative })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedFixture;
    use crate::model::create_workspace;

    fn item(path: &str) -> DataItem {
        DataItem {
            path: path.into(),
            modality: Modality::Multispectral,
            rows: 100,
            cols: 100,
            bands: 4,
            crs: "EPSG:32650".into(),
            temporal: None,
            value_summary: vec![
                BandSummary { min: Some(0.0), max: Some(1.0), mean: Some(0.5), nodata_fraction: 0.0 };
                4
            ],
            extra: Map::new(),
        }
    }

    fn task() -> TaskInstruction {
        TaskInstruction::new("t", "compute NDVI").unwrap()
    }

    #[test]
    fn ablated_narrative_mentions_shape() {
        let n = distill_profile(&[item("/data/scene.asc")], None, None).unwrap();
        assert!(n.contains("100"));
        assert!(n.contains("4 band"));
    }

    #[test]
    fn distill_uses_model_text() {
        let mut f = ScriptedFixture::default();
        f.push(RoleTag::DataSummary, "one 4-band scene");
        let gw = Gateway::scripted(f);
        assert_eq!(distill_profile(&[item("/x")], Some(&gw), None).unwrap(), "one 4-band scene");
    }

    #[test]
    fn distill_rejects_empty() {
        assert!(matches!(distill_profile(&[], None, None), Err(Error::Parameter(_))));
    }

    #[test]
    fn empty_pointers_fail_before_any_call() {
        let gw = Gateway::scripted(ScriptedFixture::default());
        let err = generate_probe_script(&task(), &[], &gw, None, 1, None).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
        assert_eq!(gw.budget.calls_used(), 0);
    }

    #[test]
    fn feedback_reaches_the_prompt() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = create_workspace("r", tmp.path()).unwrap();
        let mut f = ScriptedFixture::default();
        f.push(RoleTag::DataSummary, "print(1)");
        let gw = Gateway::scripted(f);
        let s = generate_probe_script(
            &task(),
            &[PathBuf::from("/a.asc")],
            &gw,
            Some("ValueError: bad header"),
            2,
            Some(&ws),
        )
        .unwrap();
        assert_eq!((s.body.as_str(), s.round), ("print(1)", 2));
        let ev = ws.ledger().load().unwrap().events;
        let prompt = ev[0].payload["messages"][1]["text"].as_str().unwrap();
        assert!(prompt.contains("ValueError: bad header"));
        assert!(prompt.contains("/a.asc"));
    }

    #[test]
    fn profile_json_round_trips() {
        let i = item("/x.asc");
        let text = serde_json::to_string(&i).unwrap();
        assert!(text.contains("\"nodata_fraction\":[0.0,0.0,0.0,0.0]"));
        let back: DataItem = serde_json::from_str(&text).unwrap();
        assert_eq!(back, i);
    }

    #[test]
    fn invariants_are_rechecked() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("a.asc");
        std::fs::write(&p, "x").unwrap();
        let mut i = item(p.to_str().unwrap());
        assert!(i.check().is_ok());
        i.value_summary[0].nodata_fraction = 1.5;
        assert!(i.check().is_err());
        let mut i = item(p.to_str().unwrap());
        i.value_summary[1].mean = Some(2.0);
        assert!(i.check().is_err());
        let mut i = item(p.to_str().unwrap());
        i.bands = 3;
        assert!(i.check().is_err());
        assert!(item("/no/such/file").check().is_err());
        let ragged: DataItem = serde_json::from_str(&format!(
            r#"{{"path":{:?},"bands":1,"min":[0],"max":[1,2],"mean":[0.5],"nodata_fraction":[0]}}"#,
            p.to_str().unwrap()
        ))
        .unwrap();
        assert!(ragged.check().is_err());
    }

    #[test]
    fn all_nodata_band_is_allowed() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("a.asc");
        std::fs::write(&p, "x").unwrap();
        let i: DataItem = serde_json::from_str(&format!(
            r#"{{"path":{:?},"bands":1,"min":[null],"max":[null],"mean":[null],"nodata_fraction":[1.0]}}"#,
            p.to_str().unwrap()
        ))
        .unwrap();
        assert!(i.check().is_ok());
    }

    #[test]
    fn name_resolution() {
        let mut p = DataProfile { items: vec![item("/data/Red_Band.asc")], narrative: String::new() };
        assert!(p.resolve("red_band").is_some());
        assert!(p.resolve("Red_Band.asc").is_some());
        assert!(p.resolve("nir").is_none());
        p.items[0].extra.insert("name".into(), Value::from("red"));
        assert!(p.resolve("red").is_some());
    }
}
