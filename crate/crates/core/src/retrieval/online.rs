use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EventKind, Ledger};
use crate::payload;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebResult {
    pub title: String,
    pub url: String,
    pub snippet: String,
}

pub trait SearchAdapter: Send + Sync {
    fn id(&self) -> &str;
    fn search(&self, query: &str, k: usize) -> Result<Vec<WebResult>>;
    fn enabled(&self) -> bool {
        true
    }
}

/// Default adapter: no network, always empty.
#[derive(Debug, Clone, Copy, Default)]
pub struct DisabledSearch;

impl SearchAdapter for DisabledSearch {
    fn id(&self) -> &str {
        "disabled"
    }

    fn search(&self, _query: &str, _k: usize) -> Result<Vec<WebResult>> {
        Ok(Vec::new())
    }

    fn enabled(&self) -> bool {
        false
    }
}

/// Returns the same canned results for every query.
#[derive(Debug, Clone, Default)]
pub struct FixtureSearch {
    pub results: Vec<WebResult>,
}

impl SearchAdapter for FixtureSearch {
    fn id(&self) -> &str {
        "fixture"
    }

    fn search(&self, _query: &str, k: usize) -> Result<Vec<WebResult>> {
        Ok(self.results.iter().take(k).cloned().collect())
    }
}

/// Runs one web search through `adapter` and records it in the ledger.
/// Transport failures come back as `SearchUnavailable`; callers treat that
/// as "no online knowledge" and carry on.
pub fn online_search(
    adapter: &dyn SearchAdapter,
    query: &str,
    k: usize,
    ledger: Option<&Ledger>,
) -> Result<Vec<WebResult>> {
    let outcome = if adapter.enabled() {
        adapter
            .search(query, k)
            .map(|mut r| {
                r.truncate(k);
                r
            })
            .map_err(|e| match e {
                Error::SearchUnavailable(_) => e,
                other => Error::SearchUnavailable(other.to_string()),
            })
    } else {
        Ok(Vec::new())
    };
    if let Some(ledger) = ledger {
        let marker = match (&outcome, adapter.enabled()) {
            (_, false) => "search_disabled",
            (Ok(_), true) => "search_ok",
            (Err(_), true) => "search_unavailable",
        };
        ledger.append(
            None,
            EventKind::Search,
            payload!(
                "adapter" => adapter.id(),
                "query" => query,
                "marker" => marker,
                "results" => outcome.as_ref().map(Vec::len).unwrap_or(0),
            ),
        )?;
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::create_workspace;

    struct Broken;

    impl SearchAdapter for Broken {
        fn id(&self) -> &str {
            "broken"
        }

        fn search(&self, _: &str, _: usize) -> Result<Vec<WebResult>> {
            Err(Error::Parameter("connection reset".into()))
        }
    }

    fn web(title: &str) -> WebResult {
        WebResult { title: title.into(), url: format!("https://example.org/{title}"), snippet: String::new() }
    }

    #[test]
    fn disabled_stub_records_marker() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = create_workspace("r", tmp.path()).unwrap();
        let r = online_search(&DisabledSearch, "sentinel-2 bands", 3, Some(ws.ledger())).unwrap();
        assert!(r.is_empty());
        let ev = ws.ledger().load().unwrap().events;
        assert_eq!(ev[0].payload["marker"], "search_disabled");
    }

    #[test]
    fn fixture_respects_k() {
        let f = FixtureSearch { results: vec![web("a"), web("b")] };
        let r = online_search(&f, "q", 1, None).unwrap();
        assert_eq!(r, vec![web("a")]);
    }

    #[test]
    fn transport_failure_is_search_unavailable() {
        let err = online_search(&Broken, "q", 2, None).unwrap_err();
        assert!(matches!(err, Error::SearchUnavailable(_)));
    }
}
