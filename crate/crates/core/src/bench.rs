//! Dimension × precision tradeoff grid: quality, storage and latency per cell.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::RelevanceLabels;
use crate::error::{Error, Result};
use crate::index::{build_index, IndexSpec, Precision};
use crate::matrix::EmbeddingMatrix;
use crate::metrics::{mrr_at_k, ndcg_at_k, recall_at_k, RetrievalRun};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over per-query milliseconds.
    pub fn from_samples(ms: &[f64]) -> Self {
        if ms.is_empty() {
            return Self::default();
        }
        let mut s = ms.to_vec();
        s.sort_by(f64::total_cmp);
        let pct = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Self {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p50: pct(0.5),
            p99: pct(0.99),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCell {
    pub dim: usize,
    pub precision: Precision,
    pub mrr: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub storage_bytes: u64,
    pub latency_ms: LatencyStats,
}

/// Serializes as a bare JSON array of cells.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TradeoffReport {
    pub cells: Vec<TradeoffCell>,
}

impl TradeoffReport {
    pub fn cell(&self, dim: usize, precision: Precision) -> Option<&TradeoffCell> {
        self.cells.iter().find(|c| c.dim == dim && c.precision == precision)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = self.to_json()?;
        crate::io::write_atomic(path.as_ref(), |f| {
            use std::io::Write;
            f.write_all(text.as_bytes())?;
            f.write_all(b"\n")?;
            Ok(())
        })
    }

    pub fn summary(&self, k: usize) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6}  {:<7} {:>9} {:>9} {:>9} {:>14} {:>10} {:>10} {:>10}",
            "dim",
            "prec",
            format!("MRR@{k}"),
            format!("R@{k}"),
            format!("nDCG@{k}"),
            "storage_bytes",
            "mean_ms",
            "p50_ms",
            "p99_ms"
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:>6}  {:<7} {:>9.4} {:>9.4} {:>9.4} {:>14} {:>10.3} {:>10.3} {:>10.3}",
                c.dim,
                c.precision.as_str(),
                c.mrr,
                c.recall,
                c.ndcg,
                c.storage_bytes,
                c.latency_ms.mean,
                c.latency_ms.p50,
                c.latency_ms.p99
            );
        }
        out
    }
}

/// Scores one grid cell from a finished run.
pub fn evaluate_cell(spec: IndexSpec, storage_bytes: u64, run: &RetrievalRun, labels: &RelevanceLabels, k: usize) -> TradeoffCell {
    TradeoffCell {
        dim: spec.dim,
        precision: spec.precision,
        mrr: mrr_at_k(run, labels, k),
        recall: recall_at_k(run, labels, k),
        ndcg: ndcg_at_k(run, labels, k),
        storage_bytes,
        latency_ms: LatencyStats::from_samples(&run.latency_ms),
    }
}

/// Builds and searches one index per (dim, precision), in grid order.
/// Queries within a cell run on the current rayon pool.
pub fn bench_grid(
    docs: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    labels: &RelevanceLabels,
    dims: &[usize],
    precisions: &[Precision],
    top_k: usize,
) -> Result<TradeoffReport> {
    if dims.is_empty() || precisions.is_empty() {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    if dims.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("dims must be strictly ascending, got {dims:?}")));
    }
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    let mut cells = Vec::with_capacity(dims.len() * precisions.len());
    for &dim in dims {
        for &precision in precisions {
            let spec = IndexSpec::new(dim, precision);
            let index = build_index(docs, spec)?;
            let run = index.search_all(queries, top_k)?;
            cells.push(evaluate_cell(spec, index.storage_bytes(), &run, labels, top_k));
        }
    }
    Ok(TradeoffReport { cells })
}
