//! Deterministic result checks: an ESRI ASCII grid reader and a rule engine
//! over node manifests.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{Artifact, ArtifactKind, ArtifactManifest, ArtifactStats};

pub const DEFAULT_NODATA: f64 = -9999.0;
pub const DEFAULT_INVALID_FRACTION_MAX: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub ncols: usize,
    pub nrows: usize,
    pub xll: f64,
    pub yll: f64,
    pub cellsize: f64,
    pub nodata_value: f64,
    /// `xllcenter`/`yllcenter` instead of the corner variant.
    #[serde(default)]
    pub center: bool,
}

impl GridHeader {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        GridHeader {
            ncols,
            nrows,
            xll: 0.0,
            yll: 0.0,
            cellsize: 1.0,
            nodata_value: DEFAULT_NODATA,
            center: false,
        }
    }
}

/// Summary over the non-NODATA cells of a single-band raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterStats {
    pub rows: usize,
    pub cols: usize,
    /// `None` when every cell is NODATA.
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
    pub nodata_fraction: f64,
    pub nodata_value: f64,
    pub crs: String,
}

impl RasterStats {
    pub fn to_artifact_stats(&self) -> ArtifactStats {
        ArtifactStats {
            min: self.min,
            max: self.max,
            mean: self.mean,
            nodata_fraction: Some(self.nodata_fraction),
            rows: Some(self.rows as u64),
            cols: Some(self.cols as u64),
            bands: Some(1),
            crs: Some(self.crs.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsciiGrid {
    pub header: GridHeader,
    /// Row-major, north row first.
    pub cells: Vec<f64>,
    pub stats: RasterStats,
}

impl AsciiGrid {
    pub fn is_nodata(&self, v: f64) -> bool {
        v.is_nan() || v == self.header.nodata_value
    }

    /// Cell value, `None` for NODATA or out-of-bounds.
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        if row >= self.header.nrows || col >= self.header.ncols {
            return None;
        }
        let v = self.cells[row * self.header.ncols + col];
        (!self.is_nodata(v)).then_some(v)
    }

    pub fn valid_cells(&self) -> impl Iterator<Item = f64> + '_ {
        self.cells.iter().copied().filter(|v| !self.is_nodata(*v))
    }
}

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

/// Parses ASCII grid text. `name` only labels errors.
pub fn parse_ascii_grid(text: &str, name: &str, crs: &str) -> Result<AsciiGrid> {
    let mut ncols = None;
    let mut nrows = None;
    let mut xll = None;
    let mut yll = None;
    let mut cellsize = None;
    let mut nodata = None;
    let mut center = false;

    let mut lines = text.lines().enumerate().peekable();
    while let Some(&(idx, line)) = lines.peek() {
        let mut toks = line.split_whitespace();
        let Some(key) = toks.next() else {
            lines.next();
            continue;
        };
        if !key.starts_with(|c: char| c.is_ascii_alphabetic()) {
            break;
        }
        let key = key.to_ascii_lowercase();
        if matches!(key.as_str(), "nan" | "inf" | "infinity") {
            break;
        }
        let value = toks
            .next()
            .ok_or_else(|| parse_err(name, idx + 1, format!("header `{key}` has no value")))?;
        if toks.next().is_some() {
            return Err(parse_err(name, idx + 1, format!("header `{key}` has extra tokens")));
        }
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| parse_err(name, idx + 1, format!("header `{key}` value `{v}` is not a number")))
        };
        let int = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| parse_err(name, idx + 1, format!("header `{key}` value `{v}` is not a count")))
        };
        match key.as_str() {
            "ncols" => ncols = Some(int(value)?),
            "nrows" => nrows = Some(int(value)?),
            "xllcorner" => xll = Some(num(value)?),
            "yllcorner" => yll = Some(num(value)?),
            "xllcenter" => {
                xll = Some(num(value)?);
                center = true;
            }
            "yllcenter" => {
                yll = Some(num(value)?);
                center = true;
            }
            "cellsize" => cellsize = Some(num(value)?),
            "nodata_value" => nodata = Some(num(value)?),
            other => return Err(parse_err(name, idx + 1, format!("unknown header key `{other}`"))),
        }
        lines.next();
    }

    let first_data_line = lines.peek().map_or(text.lines().count() + 1, |(i, _)| i + 1);
    let missing = |k: &str| parse_err(name, first_data_line, format!("header is missing `{k}`"));
    let header = GridHeader {
        ncols: ncols.ok_or_else(|| missing("ncols"))?,
        nrows: nrows.ok_or_else(|| missing("nrows"))?,
        xll: xll.ok_or_else(|| missing("xllcorner"))?,
        yll: yll.ok_or_else(|| missing("yllcorner"))?,
        cellsize: cellsize.ok_or_else(|| missing("cellsize"))?,
        nodata_value: nodata.unwrap_or(DEFAULT_NODATA),
        center,
    };
    if header.ncols == 0 || header.nrows == 0 {
        return Err(parse_err(name, first_data_line, "grid has zero rows or columns"));
    }

    let mut cells = Vec::with_capacity(header.ncols * header.nrows);
    let mut rows_seen = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if rows_seen == header.nrows {
            return Err(parse_err(name, idx + 1, format!("more than {} data rows", header.nrows)));
        }
        let before = cells.len();
        for tok in line.split_whitespace() {
            let v = tok
                .parse::<f64>()
                .map_err(|_| parse_err(name, idx + 1, format!("non-numeric cell `{tok}`")))?;
            cells.push(v);
        }
        let got = cells.len() - before;
        if got != header.ncols {
            return Err(parse_err(
                name,
                idx + 1,
                format!("row has {got} values, expected {}", header.ncols),
            ));
        }
        rows_seen += 1;
    }
    if rows_seen != header.nrows {
        return Err(parse_err(
            name,
            text.lines().count(),
            format!("found {rows_seen} data rows, expected {}", header.nrows),
        ));
    }

    let stats = compute_stats(&header, &cells, crs);
    Ok(AsciiGrid { header, cells, stats })
}

fn compute_stats(header: &GridHeader, cells: &[f64], crs: &str) -> RasterStats {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    let mut valid = 0usize;
    for &v in cells {
        if v.is_nan() || v == header.nodata_value {
            continue;
        }
        valid += 1;
        min = min.min(v);
        max = max.max(v);
        // Neumaier summation
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    let total = cells.len();
    let has = valid > 0;
    RasterStats {
        rows: header.nrows,
        cols: header.ncols,
        min: has.then_some(min),
        max: has.then_some(max),
        mean: has.then(|| (sum + comp) / valid as f64),
        nodata_fraction: (total - valid) as f64 / total as f64,
        nodata_value: header.nodata_value,
        crs: crs.to_string(),
    }
}

/// Reads an ASCII grid; the projection comes from a sidecar `.prj` file when
/// one exists, else `"unknown"`.
pub fn read_ascii_grid(path: &Path) -> Result<AsciiGrid> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let prj = path.with_extension("prj");
    let crs = std::fs::read_to_string(&prj)
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|_| "unknown".to_string());
    parse_ascii_grid(&text, &path.display().to_string(), &crs)
}

pub fn format_ascii_grid(header: &GridHeader, cells: &[f64]) -> String {
    let (xk, yk) = if header.center {
        ("xllcenter", "yllcenter")
    } else {
        ("xllcorner", "yllcorner")
    };
    let mut out = String::new();
    let _ = writeln!(out, "ncols {}", header.ncols);
    let _ = writeln!(out, "nrows {}", header.nrows);
    let _ = writeln!(out, "{xk} {}", header.xll);
    let _ = writeln!(out, "{yk} {}", header.yll);
    let _ = writeln!(out, "cellsize {}", header.cellsize);
    let _ = writeln!(out, "NODATA_value {}", header.nodata_value);
    for row in cells.chunks(header.ncols.max(1)) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_ascii_grid(path: &Path, header: &GridHeader, cells: &[f64]) -> Result<()> {
    if cells.len() != header.nrows * header.ncols {
        return Err(Error::Parameter(format!(
            "{} cells do not fill a {}x{} grid",
            cells.len(),
            header.nrows,
            header.ncols
        )));
    }
    std::fs::write(path, format_ascii_grid(header, cells)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum RuleCheck {
    ValueRange {
        artifact: String,
        lo: f64,
        hi: f64,
        #[serde(default)]
        integer: bool,
    },
    InvalidFractionMax {
        artifact: String,
        threshold: f64,
    },
    ArtifactExists {
        artifact: String,
    },
    MetadataMatch {
        artifact: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        crs: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rows: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cols: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bands: Option<u64>,
    },
    KeyvalueTolerance {
        key: String,
        expected: f64,
        #[serde(default = "default_rel_tol")]
        rel_tol: f64,
        #[serde(default = "default_abs_tol")]
        abs_tol: f64,
    },
}

fn default_rel_tol() -> f64 {
    0.01
}

fn default_abs_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRule {
    pub rule_id: String,
    #[serde(flatten)]
    pub check: RuleCheck,
}

impl ValidationRule {
    pub fn new(rule_id: impl Into<String>, check: RuleCheck) -> Self {
        ValidationRule {
            rule_id: rule_id.into(),
            check,
        }
    }

    pub fn value_range(artifact: &str, lo: f64, hi: f64) -> Self {
        ValidationRule::new(
            format!("{artifact}.range"),
            RuleCheck::ValueRange { artifact: artifact.into(), lo, hi, integer: false },
        )
    }

    pub fn invalid_fraction_max(artifact: &str, threshold: f64) -> Self {
        ValidationRule::new(
            format!("{artifact}.invalid"),
            RuleCheck::InvalidFractionMax { artifact: artifact.into(), threshold },
        )
    }

    pub fn artifact_exists(artifact: &str) -> Self {
        ValidationRule::new(format!("{artifact}.exists"), RuleCheck::ArtifactExists { artifact: artifact.into() })
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Error::InvalidRule {
            rule_id: self.rule_id.clone(),
            message: m.to_string(),
        };
        match &self.check {
            RuleCheck::ValueRange { lo, hi, .. } => {
                if !(lo <= hi) {
                    return Err(bad("lo must not exceed hi"));
                }
            }
            RuleCheck::InvalidFractionMax { threshold, .. } => {
                if !(0.0..=1.0).contains(threshold) {
                    return Err(bad("threshold must lie in [0, 1]"));
                }
            }
            RuleCheck::ArtifactExists { .. } => {}
            RuleCheck::MetadataMatch { crs, rows, cols, bands, .. } => {
                if crs.is_none() && rows.is_none() && cols.is_none() && bands.is_none() {
                    return Err(bad("metadata_match needs at least one expected field"));
                }
            }
            RuleCheck::KeyvalueTolerance { rel_tol, abs_tol, expected, .. } => {
                if *rel_tol < 0.0 || *abs_tol < 0.0 || !expected.is_finite() {
                    return Err(bad("tolerances must be non-negative and expected finite"));
                }
            }
        }
        Ok(())
    }
}

/// Loads a JSON list of rules and checks each one.
pub fn load_rules(path: &Path) -> Result<Vec<ValidationRule>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rules: Vec<ValidationRule> = serde_json::from_str(&text)?;
    for r in &rules {
        r.check()?;
    }
    Ok(rules)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleFailure {
    pub rule_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub pass: bool,
    pub failures: Vec<RuleFailure>,
    pub checked: usize,
}

impl ValidationReport {
    pub fn from_failures(failures: Vec<RuleFailure>, checked: usize) -> Self {
        ValidationReport {
            pass: failures.is_empty(),
            failures,
            checked,
        }
    }

    pub fn single_failure(rule_id: &str, message: impl Into<String>) -> Self {
        ValidationReport::from_failures(
            vec![RuleFailure { rule_id: rule_id.into(), message: message.into() }],
            1,
        )
    }

    /// One `rule_id: message` line per failure.
    pub fn describe(&self) -> String {
        self.failures
            .iter()
            .map(|f| format!("{}: {}", f.rule_id, f.message))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

enum Resolved<'a> {
    Missing(String),
    Found {
        #[allow(dead_code)]
        artifact: &'a Artifact,
        grid: Option<AsciiGrid>,
        stats: Option<ArtifactStats>,
    },
}

fn resolve_artifact<'a>(manifest: &'a ArtifactManifest, name: &str, workdir: &Path) -> Resolved<'a> {
    let Some(artifact) = manifest.artifact(name) else {
        return Resolved::Missing(format!("artifact missing: `{name}` is not in the manifest"));
    };
    let path: PathBuf = artifact.resolve(workdir);
    if !path.exists() {
        return Resolved::Missing(format!("artifact missing: `{name}` has no file at {}", artifact.path));
    }
    let grid = if artifact.kind == ArtifactKind::Raster {
        read_ascii_grid(&path).ok()
    } else {
        None
    };
    let stats = match &grid {
        Some(g) => Some(g.stats.to_artifact_stats()),
        None => artifact.stats.clone(),
    };
    Resolved::Found { artifact, grid, stats }
}

/// Evaluates every rule (no short-circuit). A rule naming an absent
/// artifact fails; it never passes vacuously.
pub fn evaluate_rules(
    manifest: Option<&ArtifactManifest>,
    rules: &[ValidationRule],
    workdir: &Path,
) -> ValidationReport {
    let empty = ArtifactManifest::default();
    let manifest_present = manifest.is_some();
    let manifest = manifest.unwrap_or(&empty);
    let mut cache: HashMap<String, Resolved<'_>> = HashMap::new();
    let mut failures = Vec::new();

    for rule in rules {
        let mut fail = |msg: String| {
            failures.push(RuleFailure {
                rule_id: rule.rule_id.clone(),
                message: msg,
            })
        };
        if let Err(e) = rule.check() {
            fail(e.to_string());
            continue;
        }
        if let RuleCheck::KeyvalueTolerance { key, expected, rel_tol, abs_tol } = &rule.check {
            match manifest.result(key).and_then(|v| v.as_f64()) {
                None => fail(format!("result `{key}` missing or not numeric")),
                Some(actual) => {
                    let tol = abs_tol.max(rel_tol * expected.abs());
                    if !((actual - expected).abs() <= tol) {
                        fail(format!("result `{key}` = {actual}, expected {expected} within {tol}"));
                    }
                }
            }
            continue;
        }
        let name = match &rule.check {
            RuleCheck::ValueRange { artifact, .. }
            | RuleCheck::InvalidFractionMax { artifact, .. }
            | RuleCheck::ArtifactExists { artifact }
            | RuleCheck::MetadataMatch { artifact, .. } => artifact.as_str(),
            RuleCheck::KeyvalueTolerance { .. } => unreachable!(),
        };
        if name == "results" && manifest.artifact("results").is_none() {
            match &manifest.results {
                Some(r) if !r.is_empty() => {}
                _ if !manifest_present => fail("artifact missing: no manifest.json was written".into()),
                _ => fail("artifact missing: manifest has no key-value results".into()),
            }
            continue;
        }
        let resolved = cache
            .entry(name.to_string())
            .or_insert_with(|| resolve_artifact(manifest, name, workdir));
        let (grid, stats) = match resolved {
            Resolved::Missing(msg) => {
                let msg = if manifest_present {
                    msg.clone()
                } else {
                    "artifact missing: no manifest.json was written".to_string()
                };
                fail(msg);
                continue;
            }
            Resolved::Found { grid, stats, .. } => (grid.as_ref(), stats.as_ref()),
        };
        match &rule.check {
            RuleCheck::ArtifactExists { .. } => {}
            RuleCheck::ValueRange { lo, hi, integer, .. } => {
                let Some(stats) = stats else {
                    fail(format!("no statistics available for `{name}`"));
                    continue;
                };
                if let (Some(min), Some(max)) = (stats.min, stats.max) {
                    if min < *lo || max > *hi {
                        fail(format!(
                            "out of logical range: values span [{min}, {max}], allowed [{lo}, {hi}]"
                        ));
                    }
                    let non_integer = match grid {
                        Some(g) => g.valid_cells().any(|v| v.fract() != 0.0),
                        None => min.fract() != 0.0 || max.fract() != 0.0,
                    };
                    if *integer && non_integer {
                        fail(format!("`{name}` holds non-integer values where class ids are expected"));
                    }
                }
            }
            RuleCheck::InvalidFractionMax { threshold, .. } => {
                match stats.and_then(|s| s.nodata_fraction) {
                    None => fail(format!("no statistics available for `{name}`")),
                    Some(f) if f > *threshold => {
                        if f >= 1.0 {
                            fail(format!("`{name}` consists entirely of invalid values"));
                        } else {
                            fail(format!("invalid fraction {f:.4} of `{name}` exceeds {threshold}"));
                        }
                    }
                    Some(_) => {}
                }
            }
            RuleCheck::MetadataMatch { crs, rows, cols, bands, .. } => {
                let s = stats.cloned().unwrap_or_default();
                if let Some(want) = crs {
                    if s.crs.as_deref() != Some(want.as_str()) {
                        fail(format!("crs mismatch: expected {want}, found {}", s.crs.as_deref().unwrap_or("none")));
                    }
                }
                for (label, want, got) in [("rows", rows, s.rows), ("cols", cols, s.cols), ("bands", bands, s.bands)] {
                    if let Some(want) = want {
                        if got != Some(*want) {
                            fail(format!(
                                "{label} mismatch: expected {want}, found {}",
                                got.map_or("none".into(), |g| g.to_string())
                            ));
                        }
                    }
                }
            }
            RuleCheck::KeyvalueTolerance { .. } => unreachable!(),
        }
    }
    ValidationReport::from_failures(failures, rules.len())
}

const NORMALIZED_INDICES: &[&str] = &["ndvi", "ndwi", "mndwi", "ndsi", "nbr", "ndbi", "ndmi"];

/// Default rule set for an output of the given semantic kind.
///
/// `classification` may carry its class-id span, e.g. `classification:0-5`;
/// `mask` is a 0/1 classification.
pub fn default_rules_for(semantic_kind: &str, artifact: &str) -> Vec<ValidationRule> {
    let kind = semantic_kind.trim().to_ascii_lowercase();
    let exists = ValidationRule::artifact_exists(artifact);
    let invalid = ValidationRule::invalid_fraction_max(artifact, DEFAULT_INVALID_FRACTION_MAX);
    if NORMALIZED_INDICES.contains(&kind.as_str()) {
        return vec![ValidationRule::value_range(artifact, -1.0, 1.0), invalid, exists];
    }
    let class_span = if kind == "mask" {
        Some((0.0, 1.0))
    } else if kind == "classification" {
        Some((0.0, 255.0))
    } else if let Some(span) = kind.strip_prefix("classification:") {
        span.split_once('-')
            .and_then(|(a, b)| Some((a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?)))
    } else {
        None
    };
    if let Some((lo, hi)) = class_span {
        let mut range = ValidationRule::value_range(artifact, lo, hi);
        if let RuleCheck::ValueRange { integer, .. } = &mut range.check {
            *integer = true;
        }
        return vec![range, invalid, exists];
    }
    match kind.as_str() {
        "keyvalue" | "results" => vec![ValidationRule::artifact_exists("results")],
        "raster" => vec![invalid, exists],
        _ => vec![exists],
    }
}
