//! In-batch InfoNCE with false-negative masking, and the classification
//! variant restricted to explicit wrong labels.

use crate::error::Result;
use crate::vector::{cosine_unchecked, cosine_with_grad, log_sum_exp, softmax};

use super::batch::{ContrastiveBatch, Stage};
use super::{slot_row, LossResult, Objective, Slot, SlotGrads};

/// Margin above the positive similarity past which a contrast term is
/// treated as a likely false negative.
pub const MASK_MARGIN: f64 = 0.1;

/// Every similarity that can enter a query's partition function.
///
/// `query_query[i][j] = s(q_i, q_j)`, `doc_doc[i][j] = s(d⁺_i, d⁺_j)`,
/// `query_doc[i][j] = s(q_i, d⁺_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTable {
    pub positive: Vec<f64>,
    pub hard: Vec<Vec<f64>>,
    pub query_query: Vec<Vec<f64>>,
    pub doc_doc: Vec<Vec<f64>>,
    pub query_doc: Vec<Vec<f64>>,
}

impl SimilarityTable {
    pub fn compute(batch: &ContrastiveBatch) -> Self {
        let n = batch.len();
        let q = batch.queries();
        let p = batch.positives();
        let square = |a: &crate::matrix::Rows, b: &crate::matrix::Rows| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| (0..n).map(|j| cosine_unchecked(a.row(i), b.row(j))).collect())
                .collect()
        };
        Self {
            positive: (0..n).map(|i| cosine_unchecked(q.row(i), p.row(i))).collect(),
            hard: batch
                .hard_negatives()
                .iter()
                .enumerate()
                .map(|(i, negs)| negs.iter_rows().map(|r| cosine_unchecked(q.row(i), r)).collect())
                .collect(),
            query_query: square(q, q),
            doc_doc: square(p, p),
            query_doc: square(q, p),
        }
    }
}

/// Binary contrast-term masks; `true` means the term is kept (`m = 1`).
///
/// In-batch matrices are indexed `[i][j]`; their diagonals are `false`
/// because `j = i` is never an in-batch term. The positive pair itself is
/// not maskable and has no entry.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    pub hard: Vec<Vec<bool>>,
    pub query_query: Vec<Vec<bool>>,
    pub doc_doc: Vec<Vec<bool>>,
    pub query_doc: Vec<Vec<bool>>,
}

impl MaskMatrix {
    /// Number of terms masked out across all groups.
    pub fn masked_count(&self) -> usize {
        let hard: usize = self.hard.iter().flatten().filter(|m| !**m).count();
        let off_diag = |m: &Vec<Vec<bool>>| {
            m.iter()
                .enumerate()
                .map(|(i, row)| row.iter().enumerate().filter(|(j, k)| *j != i && !**k).count())
                .sum::<usize>()
        };
        hard + off_diag(&self.query_query) + off_diag(&self.doc_doc) + off_diag(&self.query_doc)
    }
}

/// `m_ij = 0` iff `s_ij > s(q_i, d⁺_i) + 0.1`, or the contrasted document is
/// `d⁺_i` itself (same id); `1` otherwise.
pub fn compute_mask(batch: &ContrastiveBatch, sims: &SimilarityTable) -> MaskMatrix {
    let n = batch.len();
    let pos_ids = batch.positive_ids();
    let keep = |i: usize, s: f64| s <= sims.positive[i] + MASK_MARGIN;
    let in_batch = |m: &Vec<Vec<f64>>| -> Vec<Vec<bool>> {
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| j != i && pos_ids[j] != pos_ids[i] && keep(i, m[i][j]))
                    .collect()
            })
            .collect()
    };
    MaskMatrix {
        hard: sims
            .hard
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .zip(&batch.negative_ids()[i])
                    .map(|(&s, id)| *id != pos_ids[i] && keep(i, s))
                    .collect()
            })
            .collect(),
        query_query: in_batch(&sims.query_query),
        doc_doc: in_batch(&sims.doc_doc),
        query_doc: in_batch(&sims.query_doc),
    }
}

struct Term {
    sim: f64,
    a: Slot,
    b: Slot,
}

/// Terms of `Z_i`, positive first.
fn partition_terms(batch: &ContrastiveBatch, sims: &SimilarityTable, mask: &MaskMatrix) -> Vec<Vec<Term>> {
    let n = batch.len();
    let with_in_batch = batch.stage() == Stage::Stage1;
    (0..n)
        .map(|i| {
            let mut terms = vec![Term {
                sim: sims.positive[i],
                a: Slot::Query(i),
                b: Slot::Positive(i),
            }];
            for (k, &s) in sims.hard[i].iter().enumerate() {
                if mask.hard[i][k] {
                    terms.push(Term {
                        sim: s,
                        a: Slot::Query(i),
                        b: Slot::Negative(i, k),
                    });
                }
            }
            for j in 0..n {
                if with_in_batch && mask.query_query[i][j] {
                    terms.push(Term {
                        sim: sims.query_query[i][j],
                        a: Slot::Query(i),
                        b: Slot::Query(j),
                    });
                }
                if with_in_batch && mask.doc_doc[i][j] {
                    terms.push(Term {
                        sim: sims.doc_doc[i][j],
                        a: Slot::Positive(i),
                        b: Slot::Positive(j),
                    });
                }
                if mask.query_doc[i][j] {
                    terms.push(Term {
                        sim: sims.query_doc[i][j],
                        a: Slot::Query(i),
                        b: Slot::Positive(j),
                    });
                }
            }
            terms
        })
        .collect()
}

/// Mean softmax cross-entropy with the first term of each list as target.
fn softmax_ce(
    batch: &ContrastiveBatch,
    terms: &[Vec<Term>],
    with_grads: bool,
) -> (f64, Option<SlotGrads>) {
    let n = batch.len() as f64;
    let tau = batch.temperature();
    let mut value = 0.0;
    let mut grads = with_grads.then(|| SlotGrads::new(batch));
    for list in terms {
        let logits: Vec<f64> = list.iter().map(|t| t.sim / tau).collect();
        value += log_sum_exp(&logits) - logits[0];
        if let Some(g) = grads.as_mut() {
            let probs = softmax(&logits);
            for (t, (term, p)) in list.iter().zip(probs).enumerate() {
                let target = if t == 0 { 1.0 } else { 0.0 };
                let coef = (p - target) / (tau * n);
                let (_, ga, gb) = cosine_with_grad(slot_row(batch, term.a), slot_row(batch, term.b));
                let scaled = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x * coef).collect() };
                g.add(term.a, &scaled(ga));
                g.add(term.b, &scaled(gb));
            }
        }
    }
    (value / n, grads)
}

fn infonce(batch: &ContrastiveBatch, with_grads: bool) -> LossResult {
    let sims = SimilarityTable::compute(batch);
    let mask = compute_mask(batch, &sims);
    let terms = partition_terms(batch, &sims, &mask);
    let (value, grads) = softmax_ce(batch, &terms, with_grads);
    LossResult {
        value,
        grads: grads.map(SlotGrads::into_map).unwrap_or_default(),
        warnings: Vec::new(),
    }
}

/// `−(1/N) Σ_i log(e^{s(q_i,d⁺_i)/τ} / Z_i)` over the masked in-batch
/// partition function; `Stage2` batches omit the q–q and d–d groups.
pub fn retrieval_infonce(batch: &ContrastiveBatch) -> Result<LossResult> {
    Ok(infonce(batch, true))
}

fn classification_terms(batch: &ContrastiveBatch) -> (Vec<Vec<Term>>, Vec<String>) {
    let q = batch.queries();
    let mut warnings = Vec::new();
    let terms = (0..batch.len())
        .map(|i| {
            let mut terms = vec![Term {
                sim: cosine_unchecked(q.row(i), batch.positives().row(i)),
                a: Slot::Query(i),
                b: Slot::Positive(i),
            }];
            let negs = &batch.hard_negatives()[i];
            if negs.is_empty() {
                warnings.push(format!("query {i} has no explicit negatives; its loss is 0"));
            }
            for (k, r) in negs.iter_rows().enumerate() {
                terms.push(Term {
                    sim: cosine_unchecked(q.row(i), r),
                    a: Slot::Query(i),
                    b: Slot::Negative(i, k),
                });
            }
            terms
        })
        .collect();
    (terms, warnings)
}

/// Per-query softmax cross-entropy over the positive label and that query's
/// explicit wrong labels only. The batch stage is ignored.
pub fn classification_loss(batch: &ContrastiveBatch) -> Result<LossResult> {
    let (terms, warnings) = classification_terms(batch);
    let (value, grads) = softmax_ce(batch, &terms, true);
    Ok(LossResult {
        value,
        grads: grads.map(SlotGrads::into_map).unwrap_or_default(),
        warnings,
    })
}

/// [`retrieval_infonce`] as an [`Objective`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RetrievalInfoNce;

impl Objective<ContrastiveBatch> for RetrievalInfoNce {
    fn evaluate(&self, batch: &ContrastiveBatch) -> Result<LossResult> {
        retrieval_infonce(batch)
    }

    fn value(&self, batch: &ContrastiveBatch) -> Result<f64> {
        Ok(infonce(batch, false).value)
    }

    fn decisions(&self, batch: &ContrastiveBatch) -> Result<Vec<bool>> {
        let m = compute_mask(batch, &SimilarityTable::compute(batch));
        let in_batch = [m.query_query, m.doc_doc, m.query_doc].into_iter().flatten().flatten();
        Ok(m.hard.into_iter().flatten().chain(in_batch).collect())
    }
}

/// [`classification_loss`] as an [`Objective`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Classification;

impl Objective<ContrastiveBatch> for Classification {
    fn evaluate(&self, batch: &ContrastiveBatch) -> Result<LossResult> {
        classification_loss(batch)
    }

    fn value(&self, batch: &ContrastiveBatch) -> Result<f64> {
        let (terms, _) = classification_terms(batch);
        Ok(softmax_ce(batch, &terms, false).0)
    }
}
