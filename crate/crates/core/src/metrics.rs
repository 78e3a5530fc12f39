//! Ranked retrieval runs and standard IR metrics over binary relevance.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::dataset::RelevanceLabels;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: String,
    pub hits: Vec<Hit>,
}

/// Ranked hits per query, plus optional per-query wall-clock latencies.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalRun {
    pub queries: Vec<RankedList>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub latency_ms: Vec<f64>,
}

impl RetrievalRun {
    pub fn new(queries: Vec<RankedList>) -> Self {
        Self {
            queries,
            latency_ms: Vec::new(),
        }
    }

    /// Fails with `DuplicateId` if a ranking repeats a document.
    pub fn check(&self) -> Result<()> {
        for list in &self.queries {
            let mut seen = HashSet::new();
            for h in &list.hits {
                if !seen.insert(h.doc.as_str()) {
                    return Err(Error::DuplicateId(format!("{}/{}", list.query, h.doc)));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let run: Self = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        run.check()?;
        Ok(run)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        crate::io::write_atomic(path.as_ref(), |f| {
            use std::io::Write;
            f.write_all(text.as_bytes())?;
            f.write_all(b"\n")?;
            Ok(())
        })
    }
}

/// Applies `per_query` to every ranked list whose query has at least one
/// labelled positive and averages; 0 when no such query exists.
fn mean_over_labeled(
    run: &RetrievalRun,
    labels: &RelevanceLabels,
    k: usize,
    per_query: impl Fn(&[Hit], &HashSet<&str>, usize) -> f64,
) -> f64 {
    let by_query = labels.by_query();
    let mut total = 0.0;
    let mut n = 0usize;
    for list in &run.queries {
        let Some(l) = by_query.get(list.query.as_str()) else { continue };
        if l.positives.is_empty() {
            continue;
        }
        let pos: HashSet<&str> = l.positives.iter().map(String::as_str).collect();
        let top = &list.hits[..k.min(list.hits.len())];
        total += per_query(top, &pos, k);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

pub fn mrr_at_k(run: &RetrievalRun, labels: &RelevanceLabels, k: usize) -> f64 {
    mean_over_labeled(run, labels, k, |top, pos, _| {
        top.iter()
            .position(|h| pos.contains(h.doc.as_str()))
            .map_or(0.0, |r| 1.0 / (r + 1) as f64)
    })
}

pub fn recall_at_k(run: &RetrievalRun, labels: &RelevanceLabels, k: usize) -> f64 {
    mean_over_labeled(run, labels, k, |top, pos, _| {
        top.iter().filter(|h| pos.contains(h.doc.as_str())).count() as f64 / pos.len() as f64
    })
}

pub fn ndcg_at_k(run: &RetrievalRun, labels: &RelevanceLabels, k: usize) -> f64 {
    let discount = |r: usize| 1.0 / ((r + 2) as f64).log2();
    mean_over_labeled(run, labels, k, |top, pos, k| {
        let dcg: f64 = top
            .iter()
            .enumerate()
            .filter(|(_, h)| pos.contains(h.doc.as_str()))
            .map(|(r, _)| discount(r))
            .sum();
        let ideal: f64 = (0..pos.len().min(k)).map(discount).sum();
        dcg / ideal
    })
}
