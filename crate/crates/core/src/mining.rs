//! Two-stage mining: exact top-K recall, then relevance filtering
//! (positive refinement and hard-negative selection).

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetQuadruple, Instance, QueryLabels, RelevanceLabels};
use crate::error::{Error, Result};
use crate::matrix::EmbeddingMatrix;
use crate::vector::{dot, norm, ZERO_NORM};

/// Produces an embedding for an instance that does not carry one.
pub trait Embedder: Send + Sync {
    fn embed(&self, instance: &Instance) -> Option<Vec<f64>>;
}

impl<F> Embedder for F
where
    F: Fn(&Instance) -> Option<Vec<f64>> + Send + Sync,
{
    fn embed(&self, instance: &Instance) -> Option<Vec<f64>> {
        self(instance)
    }
}

/// Looks instances up by id in a precomputed embedding matrix.
pub struct MatrixEmbedder {
    matrix: EmbeddingMatrix,
    index: HashMap<String, usize>,
}

impl MatrixEmbedder {
    pub fn new(matrix: EmbeddingMatrix) -> Self {
        let index = matrix
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Self { matrix, index }
    }
}

impl Embedder for MatrixEmbedder {
    fn embed(&self, instance: &Instance) -> Option<Vec<f64>> {
        self.index.get(&instance.id).map(|&i| self.matrix.row(i).to_vec())
    }
}

pub struct MiningConfig {
    /// Candidates retrieved per query.
    pub k: usize,
    /// A query survives only if some labelled positive in its top-K scores above this.
    pub t_plus: f64,
    /// Hard negatives must score below `s̄⁺ + delta_minus`.
    pub delta_minus: f64,
    /// Consulted before an instance's inline embedding.
    pub embedder: Option<Box<dyn Embedder>>,
}

impl MiningConfig {
    pub fn new(k: usize, t_plus: f64, delta_minus: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if !(t_plus > -1.0 && t_plus < 1.0) {
            return Err(Error::InvalidArgument(format!("t_plus must lie in (-1, 1), got {t_plus}")));
        }
        if !delta_minus.is_finite() {
            return Err(Error::InvalidArgument("delta_minus must be finite".into()));
        }
        Ok(Self {
            k,
            t_plus,
            delta_minus,
            embedder: None,
        })
    }

    pub fn with_embedder(mut self, embedder: impl Embedder + 'static) -> Self {
        self.embedder = Some(Box::new(embedder));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub doc: String,
    pub score: f64,
}

/// Top-K candidates of one query, by descending score then ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryCandidates {
    pub query: String,
    pub hits: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateList {
    pub queries: Vec<QueryCandidates>,
}

pub(crate) fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Exact cosine top-K of every query against the corpus.
pub fn recall_topk(queries: &EmbeddingMatrix, corpus: &EmbeddingMatrix, k: usize) -> Result<CandidateList> {
    if queries.dim() != corpus.dim() {
        return Err(Error::DimMismatch {
            expected: corpus.dim(),
            actual: queries.dim(),
        });
    }
    let doc_norms: Vec<f64> = (0..corpus.rows()).map(|j| norm(corpus.row(j))).collect();
    if let Some(j) = doc_norms.iter().position(|&n| n < ZERO_NORM) {
        return Err(Error::EmbedderFailure(corpus.id(j).to_string()));
    }
    let lists = (0..queries.rows())
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            let qn = norm(q);
            if qn < ZERO_NORM {
                return Err(Error::EmbedderFailure(queries.id(i).to_string()));
            }
            let mut scored: Vec<(f64, usize)> = (0..corpus.rows())
                .map(|j| (dot(q, corpus.row(j)) / (qn * doc_norms[j]), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| rank_order((a.0, corpus.id(a.1)), (b.0, corpus.id(b.1)));
            let keep = k.min(scored.len());
            if keep < scored.len() && keep > 0 {
                scored.select_nth_unstable_by(keep - 1, cmp);
            }
            scored.truncate(keep);
            scored.sort_by(cmp);
            Ok(QueryCandidates {
                query: queries.id(i).to_string(),
                hits: scored
                    .into_iter()
                    .map(|(score, j)| Candidate {
                        doc: corpus.id(j).to_string(),
                        score,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateList { queries: lists })
}

/// Why a query was dropped during positive refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    /// The query has no labelled positives at all.
    NoLabeledPositive,
    /// None of its labelled positives was retrieved into the top-K.
    PositiveNotRetrieved,
    /// Positives were retrieved but none scored above `t⁺`.
    BelowThreshold,
}

/// A query that survived refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct KeptQuery {
    pub query: String,
    /// Refined positives with their scores, in candidate order.
    pub positives: Vec<Candidate>,
    /// `s̄⁺`: mean score of the refined positives.
    pub mean_positive: f64,
    /// Every labelled positive, retrieved or not; never selectable as negative.
    pub labeled_positives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryOutcome {
    Kept(KeptQuery),
    Discarded { query: String, reason: DiscardReason },
}

impl QueryOutcome {
    pub fn query(&self) -> &str {
        match self {
            QueryOutcome::Kept(k) => &k.query,
            QueryOutcome::Discarded { query, .. } => query,
        }
    }

    pub fn kept(&self) -> Option<&KeptQuery> {
        match self {
            QueryOutcome::Kept(k) => Some(k),
            QueryOutcome::Discarded { .. } => None,
        }
    }
}

/// Keeps a query iff some labelled positive in its top-K scores strictly above `t_plus`.
pub fn refine_positives(candidates: &CandidateList, labels: &RelevanceLabels, t_plus: f64) -> Vec<QueryOutcome> {
    let by_query = labels.by_query();
    candidates
        .queries
        .iter()
        .map(|qc| {
            let labeled: Vec<String> = by_query
                .get(qc.query.as_str())
                .map(|l| l.positives.clone())
                .unwrap_or_default();
            if labeled.is_empty() {
                return QueryOutcome::Discarded {
                    query: qc.query.clone(),
                    reason: DiscardReason::NoLabeledPositive,
                };
            }
            let pos: HashSet<&str> = labeled.iter().map(String::as_str).collect();
            let retrieved: Vec<&Candidate> = qc.hits.iter().filter(|h| pos.contains(h.doc.as_str())).collect();
            if retrieved.is_empty() {
                return QueryOutcome::Discarded {
                    query: qc.query.clone(),
                    reason: DiscardReason::PositiveNotRetrieved,
                };
            }
            let refined: Vec<Candidate> = retrieved.into_iter().filter(|h| h.score > t_plus).cloned().collect();
            if refined.is_empty() {
                return QueryOutcome::Discarded {
                    query: qc.query.clone(),
                    reason: DiscardReason::BelowThreshold,
                };
            }
            let mean_positive = refined.iter().map(|c| c.score).sum::<f64>() / refined.len() as f64;
            QueryOutcome::Kept(KeptQuery {
                query: qc.query.clone(),
                positives: refined,
                mean_positive,
                labeled_positives: labeled,
            })
        })
        .collect()
}

/// For every kept query, the non-positive top-K candidates scoring strictly
/// below `s̄⁺ + delta_minus`, in candidate order. Discarded queries get `None`.
pub fn select_hard_negatives(
    candidates: &CandidateList,
    outcomes: &[QueryOutcome],
    delta_minus: f64,
) -> Vec<Option<Vec<Candidate>>> {
    candidates
        .queries
        .iter()
        .zip(outcomes)
        .map(|(qc, outcome)| {
            let kept = outcome.kept()?;
            let pos: HashSet<&str> = kept.labeled_positives.iter().map(String::as_str).collect();
            let bound = kept.mean_positive + delta_minus;
            Some(
                qc.hits
                    .iter()
                    .filter(|h| !pos.contains(h.doc.as_str()) && h.score < bound)
                    .cloned()
                    .collect(),
            )
        })
        .collect()
}

/// One audit line per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub query: String,
    pub status: AuditStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<DiscardReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_positive_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positives: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negatives: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditStatus {
    Kept,
    Discarded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedDataset {
    /// Input dataset restricted to kept queries, with refined labels.
    pub dataset: DatasetQuadruple,
    pub audit: Vec<AuditEntry>,
}

impl MinedDataset {
    pub fn kept_queries(&self) -> Vec<&str> {
        self.audit
            .iter()
            .filter(|a| a.status == AuditStatus::Kept)
            .map(|a| a.query.as_str())
            .collect()
    }

    pub fn negatives_of(&self, query: &str) -> Option<&[String]> {
        self.dataset.relevance.get(query).map(|l| l.negatives.as_slice())
    }

    pub fn audit_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for a in &self.audit {
            out.push_str(&serde_json::to_string(a).map_err(|e| Error::Format(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn embed_all(instances: &[Instance], embedder: Option<&dyn Embedder>) -> Result<EmbeddingMatrix> {
    let mut dim = None;
    let mut data = Vec::new();
    let mut ids = Vec::with_capacity(instances.len());
    for inst in instances {
        let v = embedder
            .and_then(|e| e.embed(inst))
            .or_else(|| inst.embedding.clone())
            .ok_or_else(|| Error::EmbedderFailure(inst.id.clone()))?;
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => return Err(Error::EmbedderFailure(inst.id.clone())),
            _ => {}
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::EmbedderFailure(inst.id.clone()));
        }
        data.extend(v);
        ids.push(inst.id.clone());
    }
    EmbeddingMatrix::new(ids, dim.unwrap_or(0), data)
}

/// `recall_topk → refine_positives → select_hard_negatives` over a dataset.
pub fn mine(ds: &DatasetQuadruple, cfg: &MiningConfig) -> Result<MinedDataset> {
    let embedder = cfg.embedder.as_deref();
    let queries = embed_all(&ds.queries, embedder)?;
    let corpus = embed_all(&ds.corpus, embedder)?;
    if !ds.corpus.is_empty() && !ds.queries.is_empty() && queries.dim() != corpus.dim() {
        return Err(Error::DimMismatch {
            expected: corpus.dim(),
            actual: queries.dim(),
        });
    }
    let candidates = recall_topk(&queries, &corpus, cfg.k)?;
    let outcomes = refine_positives(&candidates, &ds.relevance, cfg.t_plus);
    let negatives = select_hard_negatives(&candidates, &outcomes, cfg.delta_minus);

    let mut audit = Vec::with_capacity(outcomes.len());
    let mut entries = Vec::new();
    for (outcome, negs) in outcomes.iter().zip(negatives) {
        match (outcome, negs) {
            (QueryOutcome::Kept(k), Some(negs)) => {
                let old = ds.relevance.get(&k.query);
                entries.push(QueryLabels {
                    query: k.query.clone(),
                    positives: k.positives.iter().map(|c| c.doc.clone()).collect(),
                    negatives: negs.iter().map(|c| c.doc.clone()).collect(),
                    scores: old.map(|l| l.scores.clone()).unwrap_or_default(),
                });
                audit.push(AuditEntry {
                    query: k.query.clone(),
                    status: AuditStatus::Kept,
                    reason: None,
                    mean_positive_score: Some(k.mean_positive),
                    positives: Some(k.positives.len()),
                    negatives: Some(negs.len()),
                });
            }
            (QueryOutcome::Discarded { query, reason }, _) => audit.push(AuditEntry {
                query: query.clone(),
                status: AuditStatus::Discarded,
                reason: Some(*reason),
                mean_positive_score: None,
                positives: None,
                negatives: None,
            }),
            (QueryOutcome::Kept(_), None) => unreachable!("kept queries always get a negative set"),
        }
    }
    let kept: HashSet<&str> = entries.iter().map(|e| e.query.as_str()).collect();
    let dataset = DatasetQuadruple {
        instruction: ds.instruction.clone(),
        queries: ds.queries.iter().filter(|q| kept.contains(q.id.as_str())).cloned().collect(),
        corpus: ds.corpus.clone(),
        relevance: RelevanceLabels { entries },
    };
    Ok(MinedDataset { dataset, audit })
}
