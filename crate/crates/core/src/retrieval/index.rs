use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::embed::{cosine, EmbeddingVector, Embedder, HashEmbedder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    FunctionTool,
    ReferenceScript,
    KnowledgeChunk,
    ExternalCommand,
}

impl Tier {
    pub const ALL: [Tier; 4] = [
        Tier::FunctionTool,
        Tier::ReferenceScript,
        Tier::KnowledgeChunk,
        Tier::ExternalCommand,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::FunctionTool => "function_tool",
            Tier::ReferenceScript => "reference_script",
            Tier::KnowledgeChunk => "knowledge_chunk",
            Tier::ExternalCommand => "external_command",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub entry_id: String,
    pub tier: Tier,
    pub description: String,
    #[serde(default)]
    pub body: String,
    #[serde(default, skip_serializing_if = "EmbeddingVector::is_absent")]
    pub embedding: EmbeddingVector,
    #[serde(default)]
    pub provenance: String,
}

impl CatalogEntry {
    pub fn new(entry_id: impl Into<String>, tier: Tier, description: impl Into<String>, body: impl Into<String>) -> Self {
        CatalogEntry {
            entry_id: entry_id.into(),
            tier,
            description: description.into(),
            body: body.into(),
            embedding: EmbeddingVector::default(),
            provenance: String::new(),
        }
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.entry_id.is_empty() {
            return Err(Error::Parameter("catalog entry without id".into()));
        }
        if self.description.trim().is_empty() {
            return Err(Error::Parameter(format!("entry `{}` has an empty description", self.entry_id)));
        }
        if self.tier == Tier::ExternalCommand
            && !(self.body.contains("{input}") && self.body.contains("{output}"))
        {
            return Err(Error::Parameter(format!(
                "external command `{}` needs {{input}} and {{output}} placeholders",
                self.entry_id
            )));
        }
        Ok(())
    }

    /// Fills `{input}` / `{output}` of an external command template.
    pub fn command_line(&self, input: &str, output: &str) -> Option<String> {
        (self.tier == Tier::ExternalCommand)
            .then(|| self.body.replace("{input}", input).replace("{output}", output))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub entry_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Result joined with the entry it points at.
#[derive(Debug, Clone, Copy)]
pub struct Hit<'a> {
    pub result_score: f64,
    pub rank: usize,
    pub entry: &'a CatalogEntry,
}

/// Exhaustive-scan cosine index over catalog entries.
#[derive(Clone)]
pub struct VectorIndex {
    entries: Vec<CatalogEntry>,
    by_id: HashMap<String, usize>,
    embedder: Arc<dyn Embedder>,
}

impl fmt::Debug for VectorIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorIndex")
            .field("entries", &self.entries.len())
            .field("embedder", &self.embedder.id())
            .finish()
    }
}

impl Default for VectorIndex {
    fn default() -> Self {
        VectorIndex::new(Arc::new(HashEmbedder))
    }
}

impl VectorIndex {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        VectorIndex {
            entries: Vec::new(),
            by_id: HashMap::new(),
            embedder,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn get(&self, entry_id: &str) -> Option<&CatalogEntry> {
        self.by_id.get(entry_id).map(|&i| &self.entries[i])
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    /// Adds a batch of entries. Either every entry is added or none is.
    /// Missing embeddings are computed from the description.
    pub fn add(&mut self, entries: Vec<CatalogEntry>) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &entries {
            e.check()?;
            if self.by_id.contains_key(&e.entry_id) || !seen.insert(e.entry_id.as_str()) {
                return Err(Error::DuplicateEntry(e.entry_id.clone()));
            }
        }
        for mut e in entries {
            if e.embedding.is_absent() {
                e.embedding = self.embedder.embed(&e.description);
            }
            self.by_id.insert(e.entry_id.clone(), self.entries.len());
            self.entries.push(e);
        }
        Ok(())
    }

    /// Top-`k` entries by cosine similarity to `query_text`, descending,
    /// ties broken by ascending `entry_id`.
    pub fn query_top_k(&self, query_text: &str, k: usize, tier_filter: Option<Tier>) -> Result<Vec<SearchResult>> {
        if k == 0 {
            return Err(Error::Parameter("k must be positive".into()));
        }
        let q = self.embedder.embed(query_text);
        let mut scored: Vec<(f64, &str)> = self
            .entries
            .iter()
            .filter(|e| tier_filter.is_none_or(|t| e.tier == t))
            .map(|e| (cosine(&q, &e.embedding), e.entry_id.as_str()))
            .collect();
        scored.sort_by(|a, b| match b.0.total_cmp(&a.0) {
            Ordering::Equal => a.1.cmp(b.1),
            ord => ord,
        });
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (score, id))| SearchResult {
                entry_id: id.to_string(),
                score,
                rank: i + 1,
            })
            .collect())
    }

    pub fn hits(&self, query_text: &str, k: usize, tier_filter: Option<Tier>) -> Result<Vec<Hit<'_>>> {
        Ok(self
            .query_top_k(query_text, k, tier_filter)?
            .into_iter()
            .filter_map(|r| {
                self.get(&r.entry_id).map(|entry| Hit {
                    result_score: r.score,
                    rank: r.rank,
                    entry,
                })
            })
            .collect())
    }

    /// Writes `dir/<tier>.jsonl` for every tier that has entries.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for tier in Tier::ALL {
            let path = dir.join(format!("{}.jsonl", tier.as_str()));
            let rows: Vec<&CatalogEntry> = self.entries.iter().filter(|e| e.tier == tier).collect();
            if rows.is_empty() {
                if path.exists() {
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
                continue;
            }
            let mut out = Vec::new();
            for row in rows {
                serde_json::to_writer(&mut out, row)?;
                out.push(b'\n');
            }
            let tmp = path.with_extension("jsonl.tmp");
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Loads every `<tier>.jsonl` present in `dir`.
    pub fn load(dir: &Path, embedder: Arc<dyn Embedder>) -> Result<Self> {
        let mut index = VectorIndex::new(embedder);
        for tier in Tier::ALL {
            let path = dir.join(format!("{}.jsonl", tier.as_str()));
            if path.exists() {
                index.add(load_catalog(&path)?)?;
            }
        }
        Ok(index)
    }
}

pub fn index_add(index: &mut VectorIndex, entries: Vec<CatalogEntry>) -> Result<()> {
    index.add(entries)
}

pub fn query_top_k(index: &VectorIndex, query_text: &str, k: usize, tier_filter: Option<Tier>) -> Result<Vec<SearchResult>> {
    index.query_top_k(query_text, k, tier_filter)
}

/// Reads a JSON Lines catalog file.
pub fn load_catalog(path: &Path) -> Result<Vec<CatalogEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, tier: Tier, desc: &str) -> CatalogEntry {
        CatalogEntry::new(id, tier, desc, "body")
    }

    #[test]
    fn add_and_duplicates() {
        let mut idx = VectorIndex::default();
        idx.add(vec![
            entry("a", Tier::FunctionTool, "read raster"),
            entry("b", Tier::ReferenceScript, "compute ndvi"),
            entry("c", Tier::KnowledgeChunk, "landsat bands"),
        ])
        .unwrap();
        assert_eq!(idx.len(), 3);
        let err = idx.add(vec![entry("a", Tier::FunctionTool, "again")]).unwrap_err();
        assert!(matches!(err, Error::DuplicateEntry(ref id) if id == "a"));
        let err = idx
            .add(vec![entry("x", Tier::FunctionTool, "x"), entry("x", Tier::FunctionTool, "y")])
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateEntry(_)));
        assert_eq!(idx.len(), 3);
    }

    #[test]
    fn self_query_ranks_first() {
        let mut idx = VectorIndex::default();
        idx.add(vec![
            entry("a", Tier::ReferenceScript, "compute ndvi from red and near infrared"),
            entry("b", Tier::ReferenceScript, "cloud mask from quality band"),
        ])
        .unwrap();
        let r = idx.query_top_k("cloud mask from quality band", 2, None).unwrap();
        assert_eq!(r[0].entry_id, "b");
        assert_eq!(r[0].rank, 1);
        assert!((r[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tier_filter_and_k() {
        let mut idx = VectorIndex::default();
        idx.add(vec![
            entry("f1", Tier::FunctionTool, "ndvi"),
            entry("r1", Tier::ReferenceScript, "ndvi script"),
            entry("r2", Tier::ReferenceScript, "other"),
        ])
        .unwrap();
        let r = idx.query_top_k("ndvi", 10, Some(Tier::ReferenceScript)).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|x| x.entry_id.starts_with('r')));
        assert!(matches!(idx.query_top_k("ndvi", 0, None), Err(Error::Parameter(_))));
    }

    #[test]
    fn ties_break_by_id() {
        let mut idx = VectorIndex::default();
        idx.add(vec![
            entry("zeta", Tier::FunctionTool, "same words"),
            entry("alpha", Tier::FunctionTool, "same words"),
        ])
        .unwrap();
        let r = idx.query_top_k("words", 2, None).unwrap();
        assert_eq!(r[0].entry_id, "alpha");
        assert_eq!(r[1].entry_id, "zeta");
    }

    #[test]
    fn external_command_needs_placeholders() {
        let bad = CatalogEntry::new("m", Tier::ExternalCommand, "segmenter", "seg.py in out");
        assert!(bad.check().is_err());
        let good = CatalogEntry::new("m", Tier::ExternalCommand, "segmenter", "seg.py {input} {output}");
        assert_eq!(good.command_line("a.asc", "b.asc").unwrap(), "seg.py a.asc b.asc");
    }

    #[test]
    fn catalog_embedding_is_optional() {
        let e: CatalogEntry =
            serde_json::from_str(r#"{"entry_id":"x","tier":"function_tool","description":"zonal statistics"}"#).unwrap();
        assert!(e.embedding.is_absent());
        let mut idx = VectorIndex::default();
        idx.add(vec![e]).unwrap();
        assert_eq!(idx.get("x").unwrap().embedding.dims(), super::super::embed::EMBEDDING_DIMS);
    }
}
