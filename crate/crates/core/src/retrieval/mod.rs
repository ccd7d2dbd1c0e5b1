//! Tool and knowledge retrieval.
//!
//! Four tiers of catalog entries (function tools, reference scripts,
//! knowledge chunks and external commands) live in one exhaustive-scan
//! cosine index; [`online`] adds a pluggable web-search branch.

pub mod chunk;
pub mod embed;
pub mod index;
pub mod online;

use std::path::Path;
use std::sync::Arc;

use walkdir::WalkDir;

pub use chunk::{chunk_document, Chunk};
pub use embed::{cosine, embed, EmbeddingVector, Embedder, HashEmbedder, EMBEDDING_DIMS};
pub use index::{load_catalog, CatalogEntry, Hit, SearchResult, Tier, VectorIndex};
pub use online::{online_search, DisabledSearch, FixtureSearch, SearchAdapter, WebResult};

use crate::error::{Error, Result};
use crate::llm::{extract_code, Gateway, RoleTag};
use crate::model::Ledger;
use crate::payload;

pub const DEFAULT_SCRIPT_K: usize = 5;
pub const DEFAULT_KNOWLEDGE_K: usize = 8;
pub const MAX_DESCRIPTION_WORDS: usize = 60;
pub const DOC_CHUNK_CHARS: usize = 1200;
pub const DOC_CHUNK_OVERLAP: usize = 200;

/// Asks the model for a short functional description of a script.
pub fn describe_script(body: &str, gateway: &Gateway, ledger: Option<&Ledger>) -> Result<String> {
    if body.trim().is_empty() {
        return Err(Error::Parameter("cannot describe an empty script".into()));
    }
    let req = gateway.request(RoleTag::Coder, "describe", &payload!("body" => body))?;
    let resp = gateway.complete(&req, ledger)?;
    let text = extract_code(&resp.text);
    Ok(text.split_whitespace().take(MAX_DESCRIPTION_WORDS).collect::<Vec<_>>().join(" "))
}

/// Describes each `(entry_id, body)` script and returns reference-script
/// entries, one model call per script.
pub fn describe_scripts(
    scripts: &[(String, String)],
    gateway: &Gateway,
    ledger: Option<&Ledger>,
) -> Result<Vec<CatalogEntry>> {
    scripts
        .iter()
        .map(|(id, body)| {
            let description = describe_script(body, gateway, ledger)?;
            Ok(CatalogEntry::new(id.clone(), Tier::ReferenceScript, description, body.clone())
                .with_provenance("script-library"))
        })
        .collect()
}

fn is_script(ext: &str) -> bool {
    matches!(ext, "py" | "sh" | "r" | "R" | "js" | "jl")
}

fn is_document(ext: &str) -> bool {
    matches!(ext, "md" | "txt" | "rst")
}

/// Ingests a source tree: `*.jsonl` catalog files are loaded as-is,
/// documents are chunked into knowledge entries and scripts are described
/// through the gateway (skipped when there is none).
pub fn ingest_tree(src: &Path, gateway: Option<&Gateway>, ledger: Option<&Ledger>) -> Result<Vec<CatalogEntry>> {
    let mut out = Vec::new();
    let mut scripts = Vec::new();
    let walker = WalkDir::new(src).sort_by_file_name();
    for entry in walker {
        let entry = entry.map_err(|e| Error::Parameter(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let rel = path
            .strip_prefix(src)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext == "jsonl" {
            out.extend(load_catalog(path)?);
        } else if is_document(ext) {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for c in chunk_document(&rel, &text, DOC_CHUNK_CHARS, DOC_CHUNK_OVERLAP)? {
                if c.text.trim().is_empty() {
                    continue;
                }
                out.push(
                    CatalogEntry::new(format!("{rel}#{}", c.ordinal), Tier::KnowledgeChunk, c.text.clone(), c.text)
                        .with_provenance(rel.clone()),
                );
            }
        } else if is_script(ext) {
            let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            if !body.trim().is_empty() {
                scripts.push((rel, body));
            }
        }
    }
    match gateway {
        Some(gw) if !scripts.is_empty() => out.extend(describe_scripts(&scripts, gw, ledger)?),
        None if !scripts.is_empty() => {
            log::warn!("skipping {} script(s) under {}: no model to describe them", scripts.len(), src.display());
        }
        _ => {}
    }
    Ok(out)
}

/// Everything the agents retrieve from: the catalog index plus the online
/// search adapter.
pub struct Retrieval {
    pub index: Arc<VectorIndex>,
    pub search: Arc<dyn SearchAdapter>,
}

impl Default for Retrieval {
    fn default() -> Self {
        Retrieval {
            index: Arc::new(VectorIndex::default()),
            search: Arc::new(DisabledSearch),
        }
    }
}

impl Retrieval {
    pub fn new(index: VectorIndex) -> Self {
        Retrieval {
            index: Arc::new(index),
            search: Arc::new(DisabledSearch),
        }
    }

    /// Loads a persisted index directory if it exists; otherwise empty.
    pub fn from_dir(dir: Option<&Path>) -> Result<Self> {
        match dir {
            Some(d) if d.exists() => Ok(Retrieval::new(VectorIndex::load(d, Arc::new(HashEmbedder))?)),
            _ => Ok(Retrieval::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedFixture;

    #[test]
    fn description_comes_from_the_model() {
        let mut f = ScriptedFixture::default();
        f.push(RoleTag::Coder, "computes NDVI per pixel");
        let gw = Gateway::scripted(f);
        let d = describe_script("import numpy", &gw, None).unwrap();
        assert_eq!(d, "computes NDVI per pixel");
    }

    #[test]
    fn empty_body_never_calls_the_model() {
        let gw = Gateway::scripted(ScriptedFixture::default());
        assert!(matches!(describe_script("  ", &gw, None), Err(Error::Parameter(_))));
        assert_eq!(gw.budget.calls_used(), 0);
    }

    #[test]
    fn descriptions_are_capped_at_sixty_words() {
        let mut f = ScriptedFixture::default();
        f.push(RoleTag::Coder, "word ".repeat(100));
        let gw = Gateway::scripted(f);
        let d = describe_script("x = 1", &gw, None).unwrap();
        assert_eq!(d.split_whitespace().count(), MAX_DESCRIPTION_WORDS);
    }

    #[test]
    fn ingest_mixed_tree() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path();
        std::fs::write(src.join("ndvi.py"), "print('ndvi')").unwrap();
        std::fs::write(src.join("guide.md"), "Landsat 8 band 4 is red. Band 5 is NIR.").unwrap();
        std::fs::write(
            src.join("tools.jsonl"),
            r#"{"entry_id":"seg","tier":"external_command","description":"building segmenter","body":"seg {input} {output}"}"#,
        )
        .unwrap();
        let mut f = ScriptedFixture::default();
        f.push(RoleTag::Coder, "prints ndvi");
        let gw = Gateway::scripted(f);
        let entries = ingest_tree(src, Some(&gw), None).unwrap();
        let ids: Vec<&str> = entries.iter().map(|e| e.entry_id.as_str()).collect();
        assert_eq!(ids, ["guide.md#0", "seg", "ndvi.py"]);
        assert_eq!(entries[2].description, "prints ndvi");
    }
}
