use crate::error::{Error, Result};
use crate::matrix::Rows;

use super::EmbeddingBatch;

pub(crate) const QUERIES: &str = "queries";
pub(crate) const POSITIVES: &str = "positives";
pub(crate) const DOCUMENTS: &str = "documents";

pub(crate) fn negative_name(i: usize) -> String {
    format!("negatives/{i}")
}

pub(crate) fn candidate_name(i: usize) -> String {
    format!("candidates/{i}")
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")))
    }
}

fn check_dim(rows: &Rows, dim: usize) -> Result<()> {
    if rows.dim() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: rows.dim(),
        });
    }
    if !rows.is_finite() {
        return Err(Error::NonFinite("embedding rows".into()));
    }
    Ok(())
}

/// Which in-batch negatives enter the retrieval partition function.
///
/// `Stage2` drops the query–query and document–document groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stage {
    #[default]
    Stage1,
    Stage2,
}

/// Aligned query / positive rows plus ragged per-query hard negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    queries: Rows,
    positives: Rows,
    positive_ids: Vec<String>,
    hard_negatives: Vec<Rows>,
    negative_ids: Vec<Vec<String>>,
    temperature: f64,
    stage: Stage,
}

impl ContrastiveBatch {
    /// Builds a batch, L2-normalizing every row.
    ///
    /// Rows get synthetic unique ids; use [`ContrastiveBatch::with_ids`] when
    /// documents can repeat across queries.
    pub fn new(
        queries: Rows,
        positives: Rows,
        hard_negatives: Vec<Rows>,
        temperature: f64,
        stage: Stage,
    ) -> Result<Self> {
        let n = queries.rows();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        check_temperature(temperature)?;
        let dim = queries.dim();
        check_dim(&queries, dim)?;
        check_dim(&positives, dim)?;
        if positives.rows() != n {
            return Err(Error::DimMismatch {
                expected: n,
                actual: positives.rows(),
            });
        }
        if hard_negatives.len() != n {
            return Err(Error::DimMismatch {
                expected: n,
                actual: hard_negatives.len(),
            });
        }
        let hard_negatives = hard_negatives
            .into_iter()
            .map(|r| {
                if r.is_empty() {
                    return Ok(Rows::zeros(0, dim));
                }
                check_dim(&r, dim)?;
                r.normalized()
            })
            .collect::<Result<Vec<_>>>()?;
        let positive_ids = (0..n).map(|i| format!("pos:{i}")).collect();
        let negative_ids = hard_negatives
            .iter()
            .enumerate()
            .map(|(i, r)| (0..r.rows()).map(|k| format!("neg:{i}:{k}")).collect())
            .collect();
        Ok(Self {
            queries: queries.normalized()?,
            positives: positives.normalized()?,
            positive_ids,
            hard_negatives,
            negative_ids,
            temperature,
            stage,
        })
    }

    /// Convenience constructor from plain vectors.
    pub fn from_vecs(
        queries: &[Vec<f64>],
        positives: &[Vec<f64>],
        hard_negatives: &[Vec<Vec<f64>>],
        temperature: f64,
        stage: Stage,
    ) -> Result<Self> {
        let dim = queries.first().map(Vec::len).ok_or(Error::EmptyBatch)?;
        let negs = hard_negatives
            .iter()
            .map(|v| Rows::from_vecs(dim, v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            Rows::from_vecs(dim, queries)?,
            Rows::from_vecs(dim, positives)?,
            negs,
            temperature,
            stage,
        )
    }

    /// Attaches document ids used by the identity rule of the false-negative mask.
    pub fn with_ids(mut self, positive_ids: Vec<String>, negative_ids: Vec<Vec<String>>) -> Result<Self> {
        if positive_ids.len() != self.len() || negative_ids.len() != self.len() {
            return Err(Error::DimMismatch {
                expected: self.len(),
                actual: positive_ids.len(),
            });
        }
        for (ids, rows) in negative_ids.iter().zip(&self.hard_negatives) {
            if ids.len() != rows.rows() {
                return Err(Error::DimMismatch {
                    expected: rows.rows(),
                    actual: ids.len(),
                });
            }
        }
        self.positive_ids = positive_ids;
        self.negative_ids = negative_ids;
        Ok(self)
    }

    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        self.temperature = temperature;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn queries(&self) -> &Rows {
        &self.queries
    }

    pub fn positives(&self) -> &Rows {
        &self.positives
    }

    pub fn hard_negatives(&self) -> &[Rows] {
        &self.hard_negatives
    }

    pub fn positive_ids(&self) -> &[String] {
        &self.positive_ids
    }

    pub fn negative_ids(&self) -> &[Vec<String>] {
        &self.negative_ids
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Reorders queries (with their positives and negatives) by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.dim();
        let pick = |rows: &Rows| {
            let mut data = Vec::with_capacity(rows.data().len());
            for &p in perm {
                data.extend_from_slice(rows.row(p));
            }
            Rows::new(perm.len(), d, data).expect("permutation keeps shape")
        };
        Self {
            queries: pick(&self.queries),
            positives: pick(&self.positives),
            positive_ids: perm.iter().map(|&p| self.positive_ids[p].clone()).collect(),
            hard_negatives: perm.iter().map(|&p| self.hard_negatives[p].clone()).collect(),
            negative_ids: perm.iter().map(|&p| self.negative_ids[p].clone()).collect(),
            temperature: self.temperature,
            stage: self.stage,
        }
    }
}

impl EmbeddingBatch for ContrastiveBatch {
    fn dim(&self) -> usize {
        self.queries.dim()
    }

    fn tensors(&self) -> Vec<(String, &Rows)> {
        let mut t = vec![
            (QUERIES.to_string(), &self.queries),
            (POSITIVES.to_string(), &self.positives),
        ];
        t.extend(
            self.hard_negatives
                .iter()
                .enumerate()
                .map(|(i, r)| (negative_name(i), r)),
        );
        t
    }

    fn map_tensors<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&str, &Rows) -> Result<Rows>,
    {
        let queries = f(QUERIES, &self.queries)?;
        let positives = f(POSITIVES, &self.positives)?;
        let hard_negatives = self
            .hard_negatives
            .iter()
            .enumerate()
            .map(|(i, r)| f(&negative_name(i), r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            queries,
            positives,
            hard_negatives,
            positive_ids: self.positive_ids.clone(),
            negative_ids: self.negative_ids.clone(),
            temperature: self.temperature,
            stage: self.stage,
        })
    }
}

/// Scored pairs for the CoSent objective.
#[derive(Debug, Clone, PartialEq)]
pub struct StsBatch {
    queries: Rows,
    documents: Rows,
    scores: Vec<f64>,
    temperature: f64,
}

impl StsBatch {
    pub fn new(queries: Rows, documents: Rows, scores: Vec<f64>, temperature: f64) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::EmptyBatch);
        }
        check_temperature(temperature)?;
        check_dim(&documents, queries.dim())?;
        if documents.rows() != queries.rows() || scores.len() != queries.rows() {
            return Err(Error::DimMismatch {
                expected: queries.rows(),
                actual: documents.rows().min(scores.len()),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("graded scores".into()));
        }
        Ok(Self {
            queries: queries.normalized()?,
            documents: documents.normalized()?,
            scores,
            temperature,
        })
    }

    pub fn from_pairs(pairs: &[(Vec<f64>, Vec<f64>, f64)], temperature: f64) -> Result<Self> {
        let dim = pairs.first().map(|p| p.0.len()).ok_or(Error::EmptyBatch)?;
        let q: Vec<Vec<f64>> = pairs.iter().map(|p| p.0.clone()).collect();
        let d: Vec<Vec<f64>> = pairs.iter().map(|p| p.1.clone()).collect();
        Self::new(
            Rows::from_vecs(dim, &q)?,
            Rows::from_vecs(dim, &d)?,
            pairs.iter().map(|p| p.2).collect(),
            temperature,
        )
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn queries(&self) -> &Rows {
        &self.queries
    }

    pub fn documents(&self) -> &Rows {
        &self.documents
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_scores(mut self, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != self.len() {
            return Err(Error::DimMismatch {
                expected: self.len(),
                actual: scores.len(),
            });
        }
        self.scores = scores;
        Ok(self)
    }
}

impl EmbeddingBatch for StsBatch {
    fn dim(&self) -> usize {
        self.queries.dim()
    }

    fn tensors(&self) -> Vec<(String, &Rows)> {
        vec![
            (QUERIES.to_string(), &self.queries),
            (DOCUMENTS.to_string(), &self.documents),
        ]
    }

    fn map_tensors<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&str, &Rows) -> Result<Rows>,
    {
        Ok(Self {
            queries: f(QUERIES, &self.queries)?,
            documents: f(DOCUMENTS, &self.documents)?,
            scores: self.scores.clone(),
            temperature: self.temperature,
        })
    }
}

/// Student embeddings for queries and their `k+1` candidates, with the
/// teacher's precomputed logits over those candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatch {
    queries: Rows,
    candidates: Vec<Rows>,
    teacher_logits: Vec<Vec<f64>>,
}

impl DistillBatch {
    pub fn new(queries: Rows, candidates: Vec<Rows>, teacher_logits: Vec<Vec<f64>>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let dim = queries.dim();
        if candidates.len() != queries.rows() || teacher_logits.len() != queries.rows() {
            return Err(Error::DimMismatch {
                expected: queries.rows(),
                actual: candidates.len().min(teacher_logits.len()),
            });
        }
        for (i, (c, t)) in candidates.iter().zip(&teacher_logits).enumerate() {
            if c.rows() < 2 || c.rows() != t.len() {
                return Err(Error::CandidateCountMismatch {
                    query: i,
                    candidates: c.rows(),
                    logits: t.len(),
                });
            }
            check_dim(c, dim)?;
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("teacher logits of query {i}")));
            }
        }
        let candidates = candidates
            .into_iter()
            .map(|c| c.normalized())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            queries: queries.normalized()?,
            candidates,
            teacher_logits,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn queries(&self) -> &Rows {
        &self.queries
    }

    pub fn candidates(&self) -> &[Rows] {
        &self.candidates
    }

    pub fn teacher_logits(&self) -> &[Vec<f64>] {
        &self.teacher_logits
    }
}

impl EmbeddingBatch for DistillBatch {
    fn dim(&self) -> usize {
        self.queries.dim()
    }

    fn tensors(&self) -> Vec<(String, &Rows)> {
        let mut t = vec![(QUERIES.to_string(), &self.queries)];
        t.extend(
            self.candidates
                .iter()
                .enumerate()
                .map(|(i, r)| (candidate_name(i), r)),
        );
        t
    }

    fn map_tensors<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&str, &Rows) -> Result<Rows>,
    {
        let queries = f(QUERIES, &self.queries)?;
        let candidates = self
            .candidates
            .iter()
            .enumerate()
            .map(|(i, r)| f(&candidate_name(i), r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            queries,
            candidates,
            teacher_logits: self.teacher_logits.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_normalized_on_construction() {
        let b = ContrastiveBatch::from_vecs(
            &[vec![3.0, 4.0]],
            &[vec![0.0, 2.0]],
            &[vec![vec![-5.0, 0.0]]],
            0.05,
            Stage::Stage1,
        )
        .unwrap();
        assert_eq!(b.queries().row(0), &[0.6, 0.8]);
        assert_eq!(b.positives().row(0), &[0.0, 1.0]);
        assert_eq!(b.hard_negatives()[0].row(0), &[-1.0, 0.0]);
    }

    #[test]
    fn rejects_empty_and_bad_temperature() {
        assert!(matches!(
            ContrastiveBatch::new(Rows::zeros(0, 2), Rows::zeros(0, 2), vec![], 0.05, Stage::Stage1),
            Err(Error::EmptyBatch)
        ));
        assert!(ContrastiveBatch::from_vecs(&[vec![1.0]], &[vec![1.0]], &[vec![]], 0.0, Stage::Stage1).is_err());
    }

    #[test]
    fn tensor_names_are_stable() {
        let b = ContrastiveBatch::from_vecs(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[vec![], vec![vec![1.0, 1.0]]],
            0.05,
            Stage::Stage1,
        )
        .unwrap();
        let names: Vec<String> = b.tensors().into_iter().map(|t| t.0).collect();
        assert_eq!(names, ["queries", "positives", "negatives/0", "negatives/1"]);
    }

    #[test]
    fn distill_needs_two_candidates() {
        let q = Rows::new(1, 2, vec![1.0, 0.0]).unwrap();
        let c = Rows::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            DistillBatch::new(q, vec![c], vec![vec![0.0]]),
            Err(Error::CandidateCountMismatch { .. })
        ));
    }
}
