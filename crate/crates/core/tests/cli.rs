use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use geoflow_core::cli::main_with;
use serde_json::Value;

fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

fn invoke(args: &[&str], cwd: &Path) -> (i32, String, String) {
    let argv: Vec<String> = std::iter::once("geoflow").chain(args.iter().copied()).map(String::from).collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(&argv, &BTreeMap::new(), cwd, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_then_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let case = corpus_dir().join("urban_builtup_ndbi");
    let spec: Value = serde_json::from_str(&std::fs::read_to_string(case.join("case.json")).unwrap()).unwrap();
    let fixture = case.join("fixtures/end_to_end.json");
    let mut args = vec![
        "run",
        "--task",
        spec["instruction"]["text"].as_str().unwrap(),
        "--run-id",
        "r1",
        "--backend",
        "scripted",
        "--fixture",
        s(&fixture),
        "--workspace-base",
        s(tmp.path()),
    ];
    let inputs: Vec<PathBuf> = spec["inputs"].as_array().unwrap().iter().map(|p| case.join(p.as_str().unwrap())).collect();
    for p in &inputs {
        args.extend(["--data", s(p)]);
    }
    let (code, out, err) = invoke(&args, tmp.path());
    assert_eq!(code, 0, "{out}\n{err}");
    for node in ["prep", "feature", "analysis"] {
        assert!(out.contains(node), "{out}");
    }

    let run_dir = tmp.path().join("runs/r1");
    let (code, out, _) = invoke(&["inspect", s(&run_dir), "--format", "json"], tmp.path());
    assert_eq!(code, 0);
    let doc: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(doc["run_id"], "r1");
    assert_eq!(doc["summary"]["success"], true);
    assert!(doc["event_kinds"]["execution"].as_u64().unwrap() >= 3);
    for stage in ["data_preparation", "feature_extraction", "geospatial_analysis"] {
        assert!(doc["stages"][stage].is_object(), "{stage}");
    }
}

#[test]
fn bench_writes_both_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let corpus = corpus_dir();
    let (code, out, err) = invoke(
        &["bench", "--cases", s(&corpus), "--case", "water_surface_ndwi", "--out", s(&out_dir), "--backend", "scripted"],
        tmp.path(),
    );
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("100.00"), "{out}");
    for mode in ["stage_wise", "end_to_end"] {
        let report: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join(mode).join("report.json")).unwrap()).unwrap();
        assert_eq!(report["n_cases"], 1);
    }
}

#[test]
fn index_builds_a_catalog() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    std::fs::create_dir_all(&src).unwrap();
    std::fs::write(src.join("guide.md"), "# NDVI\nNormalized difference of near infrared and red reflectance.\n").unwrap();
    std::fs::write(
        src.join("tools.jsonl"),
        r#"{"entry_id":"nd_index","tier":"function_tool","description":"normalized difference of two bands","body":"def f(): pass"}"#,
    )
    .unwrap();
    let idx = tmp.path().join("idx");
    let (code, out, err) = invoke(&["index", "--src", s(&src), "--out", s(&idx)], tmp.path());
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("2 entries"), "{out}");
}

#[test]
fn missing_inputs_and_bad_config_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, _) = invoke(&["run", "--task", "x"], tmp.path());
    assert_eq!(code, 2);
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "max_calls = \"many\"\n").unwrap();
    let (code, _, err) = invoke(&["--config", s(&cfg), "inspect", s(tmp.path())], tmp.path());
    assert_eq!(code, 2, "{err}");
    let (code, _, _) = invoke(&["bench", "--cases", s(&tmp.path().join("none"))], tmp.path());
    assert_ne!(code, 0);
}
