use std::path::{Path, PathBuf};

use geoflow_core::bench::load_cases;
use geoflow_core::corpus::write_corpus;
use walkdir::WalkDir;

fn files(root: &Path) -> Vec<PathBuf> {
    WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.path().strip_prefix(root).unwrap().to_path_buf())
        .collect()
}

#[test]
fn bundled_corpus_is_up_to_date() {
    let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus");
    let tmp = tempfile::tempdir().unwrap();
    write_corpus(tmp.path()).unwrap();
    let (want, got) = (files(tmp.path()), files(&bundled));
    assert_eq!(got, want, "regenerate with `cargo run --example gen_corpus`");
    for rel in want {
        let a = std::fs::read(tmp.path().join(&rel)).unwrap();
        let b = std::fs::read(bundled.join(&rel)).unwrap();
        assert!(a == b, "{} differs; regenerate the corpus", rel.display());
    }
}

#[test]
fn every_case_loads() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = write_corpus(tmp.path()).unwrap();
    let cases = load_cases(tmp.path()).unwrap();
    assert_eq!(cases.len(), dirs.len());
    for c in &cases {
        assert_eq!(c.stages().len(), 3, "{}", c.case_id);
        assert!(c.fixture_path(None).is_file());
    }
}
