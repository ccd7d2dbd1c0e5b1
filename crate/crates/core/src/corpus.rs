//! Synthetic benchmark corpus. Each case is a small single-band ASCII grid
//! scene with a three-step pipeline (clean → feature → summary), ground
//! truth computed here, and scripted-backend fixtures whose Python tools
//! reproduce the same arithmetic.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Map, Value};

use crate::bench::{fixture_file_name, BenchCase, Domain, NumericExpect, StageExpectation, CASE_DIR_PLACEHOLDER, CASE_FILE, FIXTURES_DIR, TRUTH_DIR};
use crate::error::{Error, Result};
use crate::llm::{RoleTag, ScriptedFixture};
use crate::model::{Stage, StageScope, TaskInstruction};
use crate::probe::Modality;
use crate::retrieval::{CatalogEntry, Tier};
use crate::validation::{format_ascii_grid, GridHeader, DEFAULT_NODATA};

pub const ROWS: usize = 20;
pub const COLS: usize = 25;
pub const CELLSIZE: f64 = 30.0;
pub const CRS: &str = "EPSG:32650";
pub const ND_TOOL_ID: &str = "nd_index";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Gt,
    Lt,
    Eq,
}

impl Cmp {
    fn as_str(self) -> &'static str {
        match self {
            Cmp::Gt => "gt",
            Cmp::Lt => "lt",
            Cmp::Eq => "eq",
        }
    }

    fn hit(self, v: f64, t: f64) -> bool {
        match self {
            Cmp::Gt => v > t,
            Cmp::Lt => v < t,
            Cmp::Eq => v == t,
        }
    }
}

/// A band as an affine function of a shared cover field plus noise.
#[derive(Debug, Clone, Copy)]
pub struct BandSpec {
    pub name: &'static str,
    pub offset: f64,
    pub slope: f64,
    pub noise: f64,
    /// Integer class codes `offset + floor(cover * slope)` instead.
    pub classes: bool,
}

const fn band(name: &'static str, offset: f64, slope: f64, noise: f64) -> BandSpec {
    BandSpec { name, offset, slope, noise, classes: false }
}

#[derive(Debug, Clone, Copy)]
pub enum FeatureOp {
    /// `(a - b) / (a + b)` over two cleaned bands.
    NormDiff { a: &'static str, b: &'static str },
    /// 1/0 mask of `band op threshold`.
    Compare { band: &'static str, op: Cmp, threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bug {
    /// The first probe script crashes.
    Probe,
    /// The first feature tool crashes with a KeyError.
    Runtime,
    /// The first summary tool forgets its manifest.
    Manifest,
}

#[derive(Debug, Clone)]
pub struct CaseSpec {
    pub id: &'static str,
    pub domain: Domain,
    pub modality: Modality,
    pub text: &'static str,
    pub bands: Vec<BandSpec>,
    pub valid: (f64, f64),
    pub feature: &'static str,
    pub feature_kind: &'static str,
    pub op: FeatureOp,
    pub label: &'static str,
    pub summary_op: Cmp,
    pub summary_threshold: f64,
    /// Feature extraction may call the `nd_index` external command.
    pub tool: bool,
    pub bug: Option<Bug>,
    pub seed: u64,
}

impl CaseSpec {
    fn clean(b: &str) -> String {
        format!("{b}_clean")
    }

    fn range(&self) -> (f64, f64) {
        match self.op {
            FeatureOp::NormDiff { .. } => (-1.0, 1.0),
            FeatureOp::Compare { .. } => (0.0, 1.0),
        }
    }
}

pub fn case_specs() -> Vec<CaseSpec> {
    use Modality::*;
    let ms = (0.0, 1.0);
    vec![
        CaseSpec {
            id: "urban_builtup_ndbi",
            domain: Domain::Urban,
            modality: Multispectral,
            text: "Estimate the built-up share of the scene from the SWIR and NIR bands using NDBI.",
            bands: vec![band("swir", 0.2, 0.2, 0.02), band("nir", 0.3, -0.1, 0.02)],
            valid: ms,
            feature: "ndbi",
            feature_kind: "ndbi",
            op: FeatureOp::NormDiff { a: "swir", b: "nir" },
            label: "built_up",
            summary_op: Cmp::Gt,
            summary_threshold: 0.0,
            tool: false,
            bug: None,
            seed: 101,
        },
        CaseSpec {
            id: "urban_lit_area_ntl",
            domain: Domain::Urban,
            modality: Ntl,
            text: "Map lit urban area from night-time light radiance above 20 nW/cm2/sr and report its extent.",
            bands: vec![band("radiance", 0.0, 80.0, 3.0)],
            valid: (0.0, 500.0),
            feature: "lit_mask",
            feature_kind: "mask",
            op: FeatureOp::Compare { band: "radiance", op: Cmp::Gt, threshold: 20.0 },
            label: "lit",
            summary_op: Cmp::Gt,
            summary_threshold: 0.5,
            tool: false,
            bug: None,
            seed: 102,
        },
        CaseSpec {
            id: "agriculture_cropland_ndvi",
            domain: Domain::Agriculture,
            modality: Multispectral,
            text: "Compute NDVI from the red and NIR bands and report the share of cropland with NDVI above 0.4.",
            bands: vec![band("red", 0.25, -0.18, 0.02), band("nir", 0.15, 0.4, 0.02)],
            valid: ms,
            feature: "ndvi",
            feature_kind: "ndvi",
            op: FeatureOp::NormDiff { a: "nir", b: "red" },
            label: "cropland",
            summary_op: Cmp::Gt,
            summary_threshold: 0.4,
            tool: true,
            bug: None,
            seed: 103,
        },
        CaseSpec {
            id: "agriculture_green_rgb",
            domain: Domain::Agriculture,
            modality: Rgb,
            text: "Derive the normalized green-red difference index from an RGB drone mosaic and report green canopy share.",
            bands: vec![band("green", 60.0, 80.0, 4.0), band("red", 120.0, -60.0, 4.0)],
            valid: (0.0, 255.0),
            feature: "ngrdi",
            feature_kind: "raster",
            op: FeatureOp::NormDiff { a: "green", b: "red" },
            label: "green_canopy",
            summary_op: Cmp::Gt,
            summary_threshold: 0.0,
            tool: false,
            bug: Some(Bug::Manifest),
            seed: 104,
        },
        CaseSpec {
            id: "vegetation_dense_ndvi",
            domain: Domain::Vegetation,
            modality: Multispectral,
            text: "Quantify dense vegetation (NDVI above 0.5) from red and NIR reflectance.",
            bands: vec![band("red", 0.22, -0.15, 0.02), band("nir", 0.2, 0.45, 0.02)],
            valid: ms,
            feature: "ndvi",
            feature_kind: "ndvi",
            op: FeatureOp::NormDiff { a: "nir", b: "red" },
            label: "dense_vegetation",
            summary_op: Cmp::Gt,
            summary_threshold: 0.5,
            tool: false,
            bug: Some(Bug::Runtime),
            seed: 105,
        },
        CaseSpec {
            id: "vegetation_forest_landcover",
            domain: Domain::Vegetation,
            modality: Product,
            text: "Extract the forest class (code 3) from the land-cover product and report forest area.",
            bands: vec![BandSpec { name: "landcover", offset: 1.0, slope: 6.0, noise: 0.05, classes: true }],
            valid: (1.0, 8.0),
            feature: "forest_mask",
            feature_kind: "mask",
            op: FeatureOp::Compare { band: "landcover", op: Cmp::Eq, threshold: 3.0 },
            label: "forest",
            summary_op: Cmp::Gt,
            summary_threshold: 0.5,
            tool: false,
            bug: None,
            seed: 106,
        },
        CaseSpec {
            id: "water_surface_ndwi",
            domain: Domain::Water,
            modality: Multispectral,
            text: "Delineate open water with NDWI from the green and NIR bands and report the water fraction.",
            bands: vec![band("green", 0.08, 0.06, 0.01), band("nir", 0.35, -0.3, 0.02)],
            valid: ms,
            feature: "ndwi",
            feature_kind: "ndwi",
            op: FeatureOp::NormDiff { a: "green", b: "nir" },
            label: "water",
            summary_op: Cmp::Gt,
            summary_threshold: 0.0,
            tool: true,
            bug: None,
            seed: 107,
        },
        CaseSpec {
            id: "water_flood_sar",
            domain: Domain::Water,
            modality: Sar,
            text: "Map flooded area from Sentinel-1 VV backscatter below -18 dB and report flooded extent.",
            bands: vec![band("vv", -8.0, -14.0, 0.8)],
            valid: (-40.0, 5.0),
            feature: "flood_mask",
            feature_kind: "mask",
            op: FeatureOp::Compare { band: "vv", op: Cmp::Lt, threshold: -18.0 },
            label: "flooded",
            summary_op: Cmp::Gt,
            summary_threshold: 0.5,
            tool: false,
            bug: Some(Bug::Runtime),
            seed: 108,
        },
        CaseSpec {
            id: "soil_moisture_ndmi",
            domain: Domain::Soil,
            modality: Multispectral,
            text: "Assess soil moisture with NDMI from NIR and SWIR and report the moist share above 0.1.",
            bands: vec![band("nir", 0.3, 0.1, 0.02), band("swir", 0.35, -0.2, 0.02)],
            valid: ms,
            feature: "ndmi",
            feature_kind: "ndmi",
            op: FeatureOp::NormDiff { a: "nir", b: "swir" },
            label: "moist",
            summary_op: Cmp::Gt,
            summary_threshold: 0.1,
            tool: false,
            bug: Some(Bug::Probe),
            seed: 109,
        },
        CaseSpec {
            id: "economy_activity_ntl",
            domain: Domain::Economy,
            modality: Ntl,
            text: "Use night-time lights above 10 nW/cm2/sr as a proxy for economic activity and report the active area.",
            bands: vec![band("radiance", 2.0, 60.0, 2.0)],
            valid: (0.0, 500.0),
            feature: "active_mask",
            feature_kind: "mask",
            op: FeatureOp::Compare { band: "radiance", op: Cmp::Gt, threshold: 10.0 },
            label: "active",
            summary_op: Cmp::Gt,
            summary_threshold: 0.5,
            tool: false,
            bug: Some(Bug::Manifest),
            seed: 110,
        },
        CaseSpec {
            id: "economy_cropland_landcover",
            domain: Domain::Economy,
            modality: Product,
            text: "Measure cropland (land-cover code 5) extent as an agricultural economy indicator.",
            bands: vec![BandSpec { name: "landcover", offset: 1.0, slope: 6.0, noise: 0.05, classes: true }],
            valid: (1.0, 8.0),
            feature: "cropland_mask",
            feature_kind: "mask",
            op: FeatureOp::Compare { band: "landcover", op: Cmp::Eq, threshold: 5.0 },
            label: "cropland",
            summary_op: Cmp::Gt,
            summary_threshold: 0.5,
            tool: false,
            bug: None,
            seed: 111,
        },
        CaseSpec {
            id: "snow_cover_ndsi",
            domain: Domain::Snow,
            modality: Multispectral,
            text: "Map snow cover with NDSI from the green and SWIR bands and report snow fraction above 0.4.",
            bands: vec![band("green", 0.1, 0.7, 0.02), band("swir", 0.25, -0.2, 0.02)],
            valid: ms,
            feature: "ndsi",
            feature_kind: "ndsi",
            op: FeatureOp::NormDiff { a: "green", b: "swir" },
            label: "snow",
            summary_op: Cmp::Gt,
            summary_threshold: 0.4,
            tool: true,
            bug: None,
            seed: 112,
        },
    ]
}

struct Grid {
    cells: Vec<f64>,
}

fn header() -> GridHeader {
    GridHeader { xll: 500000.0, yll: 4400000.0, cellsize: CELLSIZE, ..GridHeader::new(ROWS, COLS) }
}

fn is_nodata(v: f64) -> bool {
    v == DEFAULT_NODATA
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Raw input bands: a smooth cover field, per-band noise, 3% NODATA and 2%
/// out-of-range cells.
fn synth_bands(spec: &CaseSpec) -> Vec<Grid> {
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let (f1, f2): (f64, f64) = (rng.gen_range(0.15..0.45), rng.gen_range(0.1..0.35));
    let (p1, p2): (f64, f64) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
    let cover: Vec<f64> = (0..ROWS * COLS)
        .map(|i| {
            let (r, c) = ((i / COLS) as f64, (i % COLS) as f64);
            (0.5 + 0.5 * (f1 * r + p1).sin() * (f2 * c + p2).cos()).clamp(0.0, 1.0)
        })
        .collect();
    let mut grids: Vec<Grid> = spec
        .bands
        .iter()
        .map(|b| {
            let cells = cover
                .iter()
                .map(|&c| {
                    let c = (c + rng.gen_range(-b.noise..=b.noise)).clamp(0.0, 0.9999);
                    if b.classes {
                        b.offset + (c * b.slope).floor()
                    } else {
                        round4(b.offset + b.slope * c + rng.gen_range(-b.noise..=b.noise))
                    }
                })
                .collect();
            Grid { cells }
        })
        .collect();
    let garbage = spec.valid.1 + 100.0;
    for i in 0..ROWS * COLS {
        let roll: f64 = rng.gen();
        if roll < 0.03 {
            let which = rng.gen_range(0..grids.len());
            grids[which].cells[i] = DEFAULT_NODATA;
        } else if roll < 0.05 {
            let which = rng.gen_range(0..grids.len());
            grids[which].cells[i] = garbage;
        }
    }
    grids
}

fn clean(spec: &CaseSpec, g: &Grid) -> Grid {
    let (lo, hi) = spec.valid;
    Grid {
        cells: g
            .cells
            .iter()
            .map(|&v| if !is_nodata(v) && lo <= v && v <= hi { v } else { DEFAULT_NODATA })
            .collect(),
    }
}

fn feature(spec: &CaseSpec, cleaned: &BTreeMap<&str, Grid>) -> Grid {
    match spec.op {
        FeatureOp::NormDiff { a, b } => Grid {
            cells: cleaned[a]
                .cells
                .iter()
                .zip(&cleaned[b].cells)
                .map(|(&x, &y)| {
                    if is_nodata(x) || is_nodata(y) || x + y == 0.0 {
                        DEFAULT_NODATA
                    } else {
                        (x - y) / (x + y)
                    }
                })
                .collect(),
        },
        FeatureOp::Compare { band, op, threshold } => Grid {
            cells: cleaned[band]
                .cells
                .iter()
                .map(|&v| if is_nodata(v) { DEFAULT_NODATA } else if op.hit(v, threshold) { 1.0 } else { 0.0 })
                .collect(),
        },
    }
}

fn summary(spec: &CaseSpec, g: &Grid) -> Map<String, Value> {
    let vals: Vec<f64> = g.cells.iter().copied().filter(|v| !is_nodata(*v)).collect();
    let n = vals.len() as f64;
    let hits = vals.iter().filter(|&&v| spec.summary_op.hit(v, spec.summary_threshold)).count() as f64;
    let mut m = Map::new();
    m.insert(format!("mean_{}", spec.feature), json!(vals.iter().sum::<f64>() / n));
    m.insert(format!("{}_fraction", spec.label), json!(hits / n));
    m.insert(format!("{}_area_km2", spec.label), json!(hits * CELLSIZE.powi(2) / 1e6));
    m.insert("valid_cells".into(), json!(vals.len()));
    m
}

fn mean_and_nodata(g: &Grid) -> (f64, f64) {
    let vals: Vec<f64> = g.cells.iter().copied().filter(|v| !is_nodata(*v)).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (mean, (g.cells.len() - vals.len()) as f64 / g.cells.len() as f64)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_grid(path: &Path, g: &Grid) -> Result<()> {
    write(path, &format_ascii_grid(&header(), &g.cells))?;
    write(&path.with_extension("prj"), CRS)
}

fn numeric(key: String, expected: f64) -> NumericExpect {
    NumericExpect { key, expected, rel_tol: crate::bench::DEFAULT_REL_TOL, abs_tol: crate::bench::DEFAULT_ABS_TOL }
}

fn grid_metadata(m: &mut Map<String, Value>, name: &str) {
    m.insert(format!("{name}.crs"), json!(CRS));
    m.insert(format!("{name}.rows"), json!(ROWS));
    m.insert(format!("{name}.cols"), json!(COLS));
}

const GRIDLIB: &str = r#"
def read_grid(path):
    with open(path) as f:
        lines = f.read().split("\n")
    header = {}
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) == 2 and parts[0][0].isalpha():
            header[parts[0].lower()] = parts[1]
            i += 1
        else:
            break
    cells = []
    for line in lines[i:]:
        cells.extend(float(v) for v in line.split())
    return {
        "ncols": int(header["ncols"]),
        "nrows": int(header["nrows"]),
        "xll": header.get("xllcorner", "0"),
        "yll": header.get("yllcorner", "0"),
        "cellsize": float(header["cellsize"]),
        "nodata": float(header.get("nodata_value", "-9999")),
        "cells": cells,
    }


def write_grid(path, g, cells):
    n = g["ncols"]
    with open(path, "w") as f:
        f.write("ncols %d\nnrows %d\n" % (n, g["nrows"]))
        f.write("xllcorner %s\nyllcorner %s\n" % (g["xll"], g["yll"]))
        f.write("cellsize %r\nNODATA_value %r\n" % (g["cellsize"], g["nodata"]))
        for r in range(g["nrows"]):
            f.write(" ".join(repr(float(v)) for v in cells[r * n:(r + 1) * n]) + "\n")


def copy_prj(src, dst):
    prj = os.path.splitext(src)[0] + ".prj"
    if os.path.exists(prj):
        shutil.copyfile(prj, os.path.splitext(dst)[0] + ".prj")


def valid(g):
    return [v for v in g["cells"] if v != g["nodata"]]


def hit(v, op, t):
    if op == "gt":
        return v > t
    if op == "lt":
        return v < t
    return v == t


def norm_diff(a, b):
    out = []
    for x, y in zip(a["cells"], b["cells"]):
        if x == a["nodata"] or y == b["nodata"] or x + y == 0:
            out.append(a["nodata"])
        else:
            out.append((x - y) / (x + y))
    return out


def artifact(name, path, kind):
    return {"name": name, "path": os.path.relpath(path), "kind": kind}


def write_manifest(artifacts, results=None):
    doc = {"artifacts": artifacts}
    if results is not None:
        doc["results"] = results
    with open("manifest.json", "w") as f:
        json.dump(doc, f, indent=2)
"#;

const IMPORTS: &str = "import json\nimport os\nimport shlex\nimport shutil\nimport subprocess\nimport sys\n";

fn python(body: &str) -> String {
    format!("{IMPORTS}{GRIDLIB}\n\n{}", body.trim_start())
}

fn fenced(code: &str) -> String {
    format!("```python\n{code}```")
}

fn probe_script(modality: Modality, buggy: bool) -> String {
    let nodata = if buggy { r#"g["nodata_value"]"# } else { r#"g["nodata"]"# };
    python(&format!(
        r#"
MODALITY = "{}"

items = []
for path in os.environ["GF_DATA_POINTERS"].split("\n"):
    if not path:
        continue
    g = read_grid(path)
    vals = [v for v in g["cells"] if v != {nodata}]
    prj = os.path.splitext(path)[0] + ".prj"
    crs = open(prj).read().strip() if os.path.exists(prj) else ""
    n = len(g["cells"])
    items.append({{
        "path": path,
        "modality": MODALITY,
        "rows": g["nrows"],
        "cols": g["ncols"],
        "bands": 1,
        "crs": crs,
        "min": [min(vals) if vals else None],
        "max": [max(vals) if vals else None],
        "mean": [min(max(sum(vals) / len(vals), min(vals)), max(vals)) if vals else None],
        "nodata_fraction": [(n - len(vals)) / n],
    }})
with open("profile.json", "w") as f:
    json.dump({{"items": items}}, f, indent=2)
"#,
        modality.as_str()
    ))
}

fn prep_code() -> String {
    python(
        r#"
node = json.load(open("node.json"))
p = node["params"]
lo, hi = p["valid_min"], p["valid_max"]
arts = []
for name in sorted(node["inputs"]):
    src = node["inputs"][name]
    g = read_grid(src)
    out = node["outputs"][name + "_clean"]
    cells = [v if v != g["nodata"] and lo <= v <= hi else g["nodata"] for v in g["cells"]]
    write_grid(out, g, cells)
    copy_prj(src, out)
    arts.append(artifact(name + "_clean", out, "raster"))
write_manifest(arts)
"#,
    )
}

fn feature_code(spec: &CaseSpec, buggy: bool) -> String {
    let inputs = if buggy { r#"node["input"]"# } else { r#"node["inputs"]"# };
    let body = match spec.op {
        FeatureOp::NormDiff { .. } => format!(
            r#"
node = json.load(open("node.json"))
p = node["params"]
a_path, b_path = {inputs}[p["a"]], {inputs}[p["b"]]
out = node["outputs"][p["name"]]
tool = node.get("tools", {{}}).get("{ND_TOOL_ID}")
if tool:
    cmd = tool.replace("{{input}}", a_path + " " + b_path).replace("{{output}}", out)
    subprocess.run(shlex.split(cmd), check=True)
else:
    a, b = read_grid(a_path), read_grid(b_path)
    write_grid(out, a, norm_diff(a, b))
copy_prj(a_path, out)
write_manifest([artifact(p["name"], out, "raster")])
"#
        ),
        FeatureOp::Compare { .. } => format!(
            r#"
node = json.load(open("node.json"))
p = node["params"]
src = {inputs}[p["band"]]
out = node["outputs"][p["name"]]
g = read_grid(src)
cells = [g["nodata"] if v == g["nodata"] else (1.0 if hit(v, p["op"], p["threshold"]) else 0.0) for v in g["cells"]]
write_grid(out, g, cells)
copy_prj(src, out)
write_manifest([artifact(p["name"], out, "raster")])
"#
        ),
    };
    python(&body)
}

fn analysis_code(buggy: bool) -> String {
    let tail = if buggy {
        "print(json.dumps(res))\n"
    } else {
        "write_manifest([artifact(\"results\", out, \"keyvalue\")], res)\n"
    };
    python(&format!(
        r#"
node = json.load(open("node.json"))
p = node["params"]
g = read_grid(node["inputs"][p["source"]])
vals = valid(g)
hits = sum(1 for v in vals if hit(v, p["op"], p["threshold"]))
res = {{
    "mean_" + p["source"]: sum(vals) / len(vals),
    p["label"] + "_fraction": hits / len(vals),
    p["label"] + "_area_km2": hits * g["cellsize"] ** 2 / 1e6,
    "valid_cells": len(vals),
}}
out = node["outputs"]["results"]
with open(out, "w") as f:
    json.dump(res, f, indent=2)
{tail}"#
    ))
}

fn tool_script() -> String {
    python(
        r#"
*inputs, out = sys.argv[1:]
a, b = read_grid(inputs[0]), read_grid(inputs[1])
write_grid(out, a, norm_diff(a, b))
"#,
    )
}

fn port(name: &str, kind: &str) -> Value {
    json!({"name": name, "kind": kind})
}

fn out_port(name: &str, kind: &str, file: &str) -> Value {
    json!({"name": name, "kind": kind, "file": file})
}

fn feature_inputs(spec: &CaseSpec) -> Vec<String> {
    match spec.op {
        FeatureOp::NormDiff { a, b } => vec![CaseSpec::clean(a), CaseSpec::clean(b)],
        FeatureOp::Compare { band, .. } => vec![CaseSpec::clean(band)],
    }
}

fn plan_steps(spec: &CaseSpec, stages: &[Stage]) -> Vec<Value> {
    let mut steps = Vec::new();
    for &stage in stages {
        let step = match stage {
            Stage::DataPreparation => json!({
                "id": "s1",
                "description": "mask NODATA and out-of-range cells in the input bands",
                "inputs": spec.bands.iter().map(|b| b.name).collect::<Vec<_>>(),
                "outputs": spec.bands.iter().map(|b| CaseSpec::clean(b.name)).collect::<Vec<_>>(),
                "stage": stage,
            }),
            Stage::FeatureExtraction => json!({
                "id": "s2",
                "description": format!("compute {} from the cleaned bands", spec.feature),
                "inputs": feature_inputs(spec),
                "outputs": [spec.feature],
                "stage": stage,
            }),
            Stage::GeospatialAnalysis => json!({
                "id": "s3",
                "description": format!("summarize {} into {} share and area", spec.feature, spec.label),
                "inputs": [spec.feature],
                "outputs": ["results"],
                "stage": stage,
            }),
        };
        steps.push(step);
    }
    steps
}

fn workflow_nodes(spec: &CaseSpec, stages: &[Stage]) -> Vec<Value> {
    let mut nodes = Vec::new();
    for &stage in stages {
        let node = match stage {
            Stage::DataPreparation => json!({
                "id": "prep",
                "purpose": "mask NODATA and out-of-range cells",
                "stage": stage,
                "inputs": spec.bands.iter().map(|b| port(b.name, "raster")).collect::<Vec<_>>(),
                "outputs": spec.bands.iter().map(|b| {
                    let c = CaseSpec::clean(b.name);
                    out_port(&c, "raster", &format!("{c}.asc"))
                }).collect::<Vec<_>>(),
                "params": {"valid_min": spec.valid.0, "valid_max": spec.valid.1},
            }),
            Stage::FeatureExtraction => {
                let params = match spec.op {
                    FeatureOp::NormDiff { a, b } => {
                        json!({"a": CaseSpec::clean(a), "b": CaseSpec::clean(b), "name": spec.feature})
                    }
                    FeatureOp::Compare { band, op, threshold } => json!({
                        "band": CaseSpec::clean(band), "op": op.as_str(), "threshold": threshold, "name": spec.feature,
                    }),
                };
                json!({
                    "id": "feature",
                    "purpose": format!("compute {}", spec.feature),
                    "stage": stage,
                    "inputs": feature_inputs(spec).iter().map(|n| port(n, "raster")).collect::<Vec<_>>(),
                    "outputs": [out_port(spec.feature, spec.feature_kind, &format!("{}.asc", spec.feature))],
                    "params": params,
                })
            }
            Stage::GeospatialAnalysis => json!({
                "id": "analysis",
                "purpose": format!("summarize {}", spec.feature),
                "stage": stage,
                "inputs": [port(spec.feature, spec.feature_kind)],
                "outputs": [out_port("results", "keyvalue", "results.json")],
                "params": {
                    "source": spec.feature,
                    "op": spec.summary_op.as_str(),
                    "threshold": spec.summary_threshold,
                    "label": spec.label,
                },
            }),
        };
        nodes.push(node);
    }
    nodes
}

/// Role queues for one run covering `stages`.
pub fn fixture_for(spec: &CaseSpec, stages: &[Stage]) -> ScriptedFixture {
    let mut f = ScriptedFixture { strict: false, ..Default::default() };
    let modality = if stages[0] == Stage::GeospatialAnalysis { Modality::Product } else { spec.modality };
    if spec.bug == Some(Bug::Probe) {
        f.push(RoleTag::DataSummary, fenced(&probe_script(modality, true)));
    }
    f.push(RoleTag::DataSummary, fenced(&probe_script(modality, false)));
    f.push(
        RoleTag::DataSummary,
        format!("Single-band {} ASCII grids of {ROWS}x{COLS} cells at {CELLSIZE} m in {CRS}; NODATA is {DEFAULT_NODATA}.", modality.as_str()),
    );
    let good = json!({"steps": plan_steps(spec, stages)}).to_string();
    let bad = json!({"steps": [{
        "id": "s1",
        "description": "derive terrain slope from the elevation model before any spectral work",
        "inputs": ["dem"],
        "outputs": ["slope"],
        "stage": stages[0],
    }]})
    .to_string();
    f.push(RoleTag::Planner, good.clone()).push(RoleTag::Planner, good).push(RoleTag::Planner, bad);
    f.push(RoleTag::Workflow, json!({"nodes": workflow_nodes(spec, stages)}).to_string());
    for &stage in stages {
        match stage {
            Stage::DataPreparation => {
                f.push(RoleTag::Coder, fenced(&prep_code()));
            }
            Stage::FeatureExtraction => {
                if spec.bug == Some(Bug::Runtime) {
                    f.push(RoleTag::Coder, fenced(&feature_code(spec, true)));
                }
                f.push(RoleTag::Coder, fenced(&feature_code(spec, false)));
            }
            Stage::GeospatialAnalysis => {
                if spec.bug == Some(Bug::Manifest) {
                    f.push(RoleTag::Coder, fenced(&analysis_code(true)));
                }
                f.push(RoleTag::Coder, fenced(&analysis_code(false)));
            }
        }
    }
    f.push(RoleTag::Checker, "Look at the first failing statement in the traceback and fix only that.");
    f
}

/// Writes one case bundle under `dir/<case_id>` and returns its path.
pub fn write_case(spec: &CaseSpec, dir: &Path) -> Result<PathBuf> {
    let root = dir.join(spec.id);
    let raw = synth_bands(spec);
    let mut inputs = Vec::new();
    let mut cleaned: BTreeMap<&str, Grid> = BTreeMap::new();
    let mut dp = StageExpectation::default();
    for (b, g) in spec.bands.iter().zip(&raw) {
        let rel = PathBuf::from("inputs").join(format!("{}.asc", b.name));
        write_grid(&root.join(&rel), g)?;
        inputs.push(rel);
        let c = clean(spec, g);
        let name = CaseSpec::clean(b.name);
        write_grid(&root.join(TRUTH_DIR).join(Stage::DataPreparation.as_str()).join(format!("{name}.asc")), &c)?;
        let (mean, nodata) = mean_and_nodata(&c);
        dp.location_expect.push(format!("{name}.asc"));
        grid_metadata(&mut dp.metadata_expect, &name);
        dp.numeric_expect.push(numeric(format!("{name}.mean"), mean));
        dp.numeric_expect.push(numeric(format!("{name}.nodata_fraction"), nodata));
        cleaned.insert(b.name, c);
    }

    let feat = feature(spec, &cleaned);
    write_grid(&root.join(TRUTH_DIR).join(Stage::FeatureExtraction.as_str()).join(format!("{}.asc", spec.feature)), &feat)?;
    let mut fe = StageExpectation { location_expect: vec![format!("{}.asc", spec.feature)], ..Default::default() };
    grid_metadata(&mut fe.metadata_expect, spec.feature);
    let (lo, hi) = spec.range();
    fe.metadata_expect.insert(format!("{}.range", spec.feature), json!([lo, hi]));
    fe.numeric_expect.push(numeric(format!("{}.mean", spec.feature), mean_and_nodata(&feat).0));

    let results = summary(spec, &feat);
    write(
        &root.join(TRUTH_DIR).join(Stage::GeospatialAnalysis.as_str()).join("results.json"),
        &(serde_json::to_string_pretty(&results)? + "\n"),
    )?;
    let ga = StageExpectation {
        location_expect: vec!["results.json".into()],
        numeric_expect: results.iter().filter_map(|(k, v)| Some(numeric(k.clone(), v.as_f64()?))).collect(),
        ..Default::default()
    };

    let mut provided_tools = Vec::new();
    if spec.tool {
        write(&root.join("tools").join(format!("{ND_TOOL_ID}.py")), &tool_script())?;
        provided_tools.push(CatalogEntry::new(
            ND_TOOL_ID,
            Tier::ExternalCommand,
            "normalized difference index (a - b) / (a + b) of two single-band ASCII grids, written as an ASCII grid",
            format!("python3 {CASE_DIR_PLACEHOLDER}/tools/{ND_TOOL_ID}.py {{input}} {{output}}"),
        ));
    }

    let instruction = TaskInstruction::new(spec.id, spec.text)?
        .with_domain(serde_json::to_value(spec.domain)?.as_str().unwrap_or_default())
        .with_scope(StageScope::FullPipeline);
    let case = BenchCase {
        case_id: spec.id.into(),
        domain: spec.domain,
        instruction,
        inputs,
        stage_specs: BTreeMap::from([
            (Stage::DataPreparation, dp),
            (Stage::FeatureExtraction, fe),
            (Stage::GeospatialAnalysis, ga),
        ]),
        provided_tools,
        stage_inputs: BTreeMap::new(),
        dir: PathBuf::new(),
    };
    write(&root.join(CASE_FILE), &(serde_json::to_string_pretty(&case)? + "\n"))?;

    let fixtures = root.join(FIXTURES_DIR);
    for stage in Stage::ALL {
        let f = fixture_for(spec, &[stage]);
        write(&fixtures.join(fixture_file_name(Some(stage))), &(serde_json::to_string_pretty(&f)? + "\n"))?;
    }
    let f = fixture_for(spec, &Stage::ALL);
    write(&fixtures.join(fixture_file_name(None)), &(serde_json::to_string_pretty(&f)? + "\n"))?;
    Ok(root)
}

/// Writes every case of [`case_specs`] under `dir`.
pub fn write_corpus(dir: &Path) -> Result<Vec<PathBuf>> {
    case_specs().iter().map(|s| write_case(s, dir)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn coverage_of_domains_and_modalities() {
        let specs = case_specs();
        let domains: BTreeSet<Domain> = specs.iter().map(|s| s.domain).collect();
        assert_eq!(domains.len(), Domain::ALL.len());
        let modalities: BTreeSet<&str> = specs.iter().map(|s| s.modality.as_str()).collect();
        assert_eq!(modalities.len(), 5);
        let ids: BTreeSet<&str> = specs.iter().map(|s| s.id).collect();
        assert_eq!(ids.len(), specs.len());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = &case_specs()[0];
        let a: Vec<Vec<f64>> = synth_bands(spec).into_iter().map(|g| g.cells).collect();
        let b: Vec<Vec<f64>> = synth_bands(spec).into_iter().map(|g| g.cells).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn written_case_loads() {
        let tmp = tempfile::tempdir().unwrap();
        for spec in case_specs().iter().filter(|s| s.tool) {
            let dir = write_case(spec, tmp.path()).unwrap();
            let case = crate::bench::load_case(&dir).unwrap();
            assert_eq!(case.stage_specs.len(), 3);
            assert!(!case.provided_tools[0].body.contains(CASE_DIR_PLACEHOLDER));
            assert_eq!(case.inputs_for(Stage::GeospatialAnalysis).unwrap().len(), 1);
            let f = ScriptedFixture::load(&case.fixture_path(None)).unwrap();
            assert_eq!(f.queues[&RoleTag::Planner].len(), 3);
        }
    }

    #[test]
    fn masks_are_binary_and_indices_bounded() {
        for spec in case_specs() {
            let cleaned: BTreeMap<&str, Grid> =
                spec.bands.iter().zip(synth_bands(&spec)).map(|(b, g)| (b.name, clean(&spec, &g))).collect();
            let f = feature(&spec, &cleaned);
            let (lo, hi) = spec.range();
            let vals: Vec<f64> = f.cells.iter().copied().filter(|v| !is_nodata(*v)).collect();
            assert!(!vals.is_empty(), "{}", spec.id);
            assert!(vals.iter().all(|v| (lo..=hi).contains(v)), "{}", spec.id);
            let s = summary(&spec, &f);
            let frac = s[&format!("{}_fraction", spec.label)].as_f64().unwrap();
            assert!(frac > 0.0 && frac < 1.0, "{} fraction {frac}", spec.id);
        }
    }
}
