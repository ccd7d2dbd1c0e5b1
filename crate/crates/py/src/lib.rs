//! Python bindings. Structured values cross the boundary as plain
//! dicts/lists through JSON.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use geoflow_core::bench::{self, BenchRunner};
use geoflow_core::engine::{BackendKind, EngineConfig};
use geoflow_core::manifest::ArtifactManifest;
use geoflow_core::model::{load_ledger as core_load_ledger, Workspace};
use geoflow_core::planner::{self, CandidatePlan, WorkflowDag};
use geoflow_core::probe::DataProfile;
use geoflow_core::retrieval::{self, CatalogEntry, HashEmbedder, Tier};
use geoflow_core::validation::{self, ValidationRule};

create_exception!(geoflow, GeoflowError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    GeoflowError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

fn parse_tier(s: &str) -> PyResult<Tier> {
    Tier::ALL
        .into_iter()
        .find(|t| t.as_str() == s)
        .ok_or_else(|| err(format!("unknown tier `{s}`")))
}

/// 64-bit FNV-1a hash of `data`.
#[pyfunction]
fn fnv1a64(data: &[u8]) -> u64 {
    retrieval::embed::fnv1a64(data)
}

/// L2-normalized hashed bag-of-tokens embedding.
#[pyfunction]
fn embed(text: &str) -> Vec<f64> {
    retrieval::embed(text).0
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> f64 {
    retrieval::cosine(&retrieval::EmbeddingVector(a), &retrieval::EmbeddingVector(b))
}

#[pyfunction]
#[pyo3(signature = (doc_id, text, max_chars = 800, overlap = 100))]
fn chunk_document<'py>(py: Python<'py>, doc_id: &str, text: &str, max_chars: usize, overlap: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &retrieval::chunk_document(doc_id, text, max_chars, overlap).map_err(err)?)
}

/// Header, statistics and cells of an ESRI ASCII grid.
#[pyfunction]
fn read_ascii_grid<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let g = validation::read_ascii_grid(&path).map_err(err)?;
    to_py(py, &serde_json::json!({"header": g.header, "stats": g.stats, "cells": g.cells}))
}

#[pyfunction]
fn default_rules_for<'py>(py: Python<'py>, semantic_kind: &str, artifact: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &validation::default_rules_for(semantic_kind, artifact))
}

/// Evaluates rules against a manifest dict (or None) in `workdir`.
#[pyfunction]
fn evaluate_rules<'py>(py: Python<'py>, manifest: &Bound<'py, PyAny>, rules: &Bound<'py, PyAny>, workdir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let manifest: Option<ArtifactManifest> = if manifest.is_none() { None } else { Some(from_py(manifest)?) };
    let rules: Vec<ValidationRule> = from_py(rules)?;
    for r in &rules {
        r.check().map_err(err)?;
    }
    to_py(py, &validation::evaluate_rules(manifest.as_ref(), &rules, &workdir))
}

/// Violations and topological order of a workflow DAG dict.
#[pyfunction]
#[pyo3(signature = (dag, profile = None))]
fn validate_dag<'py>(py: Python<'py>, dag: &Bound<'py, PyAny>, profile: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let dag: WorkflowDag = from_py(dag)?;
    let profile: DataProfile = match profile {
        Some(p) => from_py(p)?,
        None => DataProfile::default(),
    };
    let report = planner::validate_dag(&dag, &profile);
    to_py(py, &serde_json::json!({"ok": report.ok(), "violations": report.violations, "order": report.order}))
}

#[pyfunction]
fn plan_similarity(a: &Bound<'_, PyAny>, b: &Bound<'_, PyAny>) -> PyResult<f64> {
    let a: CandidatePlan = from_py(a)?;
    let b: CandidatePlan = from_py(b)?;
    Ok(planner::plan_similarity(&a, &b, &HashEmbedder))
}

#[pyfunction]
#[pyo3(signature = (actual, expected, rel_tol = bench::DEFAULT_REL_TOL, abs_tol = bench::DEFAULT_ABS_TOL))]
fn within_tolerance(actual: f64, expected: f64, rel_tol: f64, abs_tol: f64) -> bool {
    bench::within_tolerance(actual, expected, rel_tol, abs_tol)
}

/// Events of a run directory's ledger.
#[pyfunction]
fn load_ledger<'py>(py: Python<'py>, run_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let ws = Workspace::open_root(&run_dir).map_err(err)?;
    to_py(py, &core_load_ledger(&ws).map_err(err)?.events)
}

/// Writes the synthetic case corpus; returns the case directories.
#[pyfunction]
fn write_corpus(dir: PathBuf) -> PyResult<Vec<String>> {
    Ok(geoflow_core::corpus::write_corpus(&dir)
        .map_err(err)?
        .into_iter()
        .map(|p| p.display().to_string())
        .collect())
}

/// Runs the benchmark on case bundles with their scripted fixtures and
/// returns the metrics report.
#[pyfunction]
#[pyo3(signature = (cases_dir, out_dir, mode = "stage_wise", config = None))]
fn run_bench<'py>(
    py: Python<'py>,
    cases_dir: PathBuf,
    out_dir: PathBuf,
    mode: &str,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg: EngineConfig = match config {
        Some(c) => from_py(c)?,
        None => EngineConfig { backend: BackendKind::Scripted, ..EngineConfig::default() },
    };
    cfg.workspace_base = out_dir.clone();
    let cases = bench::load_cases(&cases_dir).map_err(err)?;
    let runner = BenchRunner::new(cfg).map_err(err)?;
    let report = py.detach(|| match mode {
        "stage_wise" => Ok(runner.run_stage_wise(&cases)),
        "end_to_end" => Ok(runner.run_end_to_end(&cases)),
        other => Err(format!("unknown mode `{other}`")),
    });
    let report = report.map_err(err)?;
    bench::write_report(&report, &out_dir.join(mode)).map_err(err)?;
    to_py(py, &report)
}

/// Catalog index with top-k cosine retrieval.
#[pyclass(name = "VectorIndex")]
struct PyVectorIndex {
    inner: retrieval::VectorIndex,
}

#[pymethods]
impl PyVectorIndex {
    #[new]
    fn new() -> Self {
        PyVectorIndex { inner: retrieval::VectorIndex::default() }
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyVectorIndex { inner: retrieval::VectorIndex::load(&dir, Arc::new(HashEmbedder)).map_err(err)? })
    }

    #[pyo3(signature = (entry_id, tier, description, body = String::new()))]
    fn add(&mut self, entry_id: String, tier: &str, description: String, body: String) -> PyResult<()> {
        let entry = CatalogEntry::new(entry_id, parse_tier(tier)?, description, body);
        self.inner.add(vec![entry]).map_err(err)
    }

    /// `(entry_id, score)` pairs, best first.
    #[pyo3(signature = (text, k, tier = None))]
    fn query(&self, text: &str, k: usize, tier: Option<&str>) -> PyResult<Vec<(String, f64)>> {
        let tier = tier.map(parse_tier).transpose()?;
        Ok(self
            .inner
            .query_top_k(text, k, tier)
            .map_err(err)?
            .into_iter()
            .map(|r| (r.entry_id, r.score))
            .collect())
    }

    fn persist(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.persist(Path::new(&dir)).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pymodule]
fn geoflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GeoflowError", m.py().get_type::<GeoflowError>())?;
    m.add_class::<PyVectorIndex>()?;
    m.add_function(wrap_pyfunction!(fnv1a64, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(chunk_document, m)?)?;
    m.add_function(wrap_pyfunction!(read_ascii_grid, m)?)?;
    m.add_function(wrap_pyfunction!(default_rules_for, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_rules, m)?)?;
    m.add_function(wrap_pyfunction!(validate_dag, m)?)?;
    m.add_function(wrap_pyfunction!(plan_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(within_tolerance, m)?)?;
    m.add_function(wrap_pyfunction!(load_ledger, m)?)?;
    m.add_function(wrap_pyfunction!(write_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    Ok(())
}
