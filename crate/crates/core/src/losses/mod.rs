//! Training objectives over embedding rows, with analytic gradients.
//!
//! Every loss sees its inputs through [`EmbeddingBatch`], a set of named
//! [`Rows`] blocks, and returns gradients keyed by the same names. Similarity
//! is always the full cosine `⟨a,b⟩/(‖a‖‖b‖)`, so gradients stay valid when
//! wrappers feed rows that are no longer unit length (truncated prefixes,
//! quantized codes, finite-difference probes).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::Rows;

mod batch;
mod cosent;
mod distill;
mod mrl;
mod retrieval;

pub use batch::{ContrastiveBatch, DistillBatch, Stage, StsBatch};
pub use cosent::{cosent_loss, CoSent};
pub use distill::{distill_loss, Distill};
pub use mrl::{mrl_wrap, Matryoshka};
pub use retrieval::{
    classification_loss, compute_mask, retrieval_infonce, Classification, MaskMatrix,
    RetrievalInfoNce, SimilarityTable, MASK_MARGIN,
};

/// Default temperature for the contrastive and CoSent objectives.
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

/// Loss value with gradients w.r.t. every input block.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grads: BTreeMap<String, Rows>,
    pub warnings: Vec<String>,
}

impl LossResult {
    pub fn grad(&self, name: &str) -> Option<&Rows> {
        self.grads.get(name)
    }

    pub(crate) fn zeros_like<B: EmbeddingBatch>(batch: &B) -> Self {
        let grads = batch
            .tensors()
            .into_iter()
            .map(|(name, rows)| (name, Rows::zeros(rows.rows(), rows.dim())))
            .collect();
        Self {
            value: 0.0,
            grads,
            warnings: Vec::new(),
        }
    }

    /// Adds `weight × other` into `self`, matching gradients by name.
    pub(crate) fn accumulate(&mut self, other: &LossResult, weight: f64) {
        self.value += weight * other.value;
        for (name, g) in &other.grads {
            let dst = self
                .grads
                .entry(name.clone())
                .or_insert_with(|| Rows::zeros(g.rows(), g.dim()));
            for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                *d += weight * s;
            }
        }
        for w in &other.warnings {
            if !self.warnings.contains(w) {
                self.warnings.push(w.clone());
            }
        }
    }
}

/// Named embedding blocks a loss is differentiated against.
pub trait EmbeddingBatch: Clone + Send + Sync {
    /// Full embedding dimension shared by every block.
    fn dim(&self) -> usize;

    /// Blocks in a fixed order, with stable names.
    fn tensors(&self) -> Vec<(String, &Rows)>;

    /// Rebuilds the batch with each block replaced by `f(name, block)`.
    ///
    /// Everything that is not an embedding (ids, labels, temperature) is kept.
    /// Rows are not re-normalized.
    fn map_tensors<F>(&self, f: F) -> Result<Self>
    where
        F: FnMut(&str, &Rows) -> Result<Rows>;
}

/// A differentiable objective over batches of type `B`.
pub trait Objective<B: EmbeddingBatch>: Sync {
    fn evaluate(&self, batch: &B) -> Result<LossResult>;

    /// Loss value alone; overridden where skipping the backward pass is cheaper.
    fn value(&self, batch: &B) -> Result<f64> {
        Ok(self.evaluate(batch)?.value)
    }

    /// Discrete decisions the value depends on, such as false-negative mask
    /// entries. The loss is discontinuous where one of them flips.
    fn decisions(&self, _batch: &B) -> Result<Vec<bool>> {
        Ok(Vec::new())
    }
}

impl<B: EmbeddingBatch, T: Objective<B> + ?Sized> Objective<B> for &T {
    fn evaluate(&self, batch: &B) -> Result<LossResult> {
        (**self).evaluate(batch)
    }

    fn value(&self, batch: &B) -> Result<f64> {
        (**self).value(batch)
    }

    fn decisions(&self, batch: &B) -> Result<Vec<bool>> {
        (**self).decisions(batch)
    }
}

/// Largest relative disagreement between the analytic gradient of `op` and
/// central finite differences over every embedding component of `batch`.
///
/// The error for one component is `|g_fd − g_an| / max(1, |g_fd|)`.
/// Components whose stencil changes [`Objective::decisions`] sit on a
/// discontinuity and are skipped.
pub fn grad_check<B, L>(op: &L, batch: &B, eps: f64) -> Result<f64>
where
    B: EmbeddingBatch,
    L: Objective<B> + ?Sized,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-4]"
        )));
    }
    let analytic = op.evaluate(batch)?;
    let base_decisions = op.decisions(batch)?;
    let mut worst = 0.0f64;
    let names: Vec<(String, usize)> = batch
        .tensors()
        .into_iter()
        .map(|(n, r)| (n, r.data().len()))
        .collect();
    for (name, len) in names {
        let zero = Rows::zeros(0, 0);
        let grad = analytic.grads.get(&name).unwrap_or(&zero);
        for k in 0..len {
            let shift = |delta: f64| {
                batch.map_tensors(|n, rows| {
                    let mut rows = rows.clone();
                    if n == name {
                        rows.data_mut()[k] += delta;
                    }
                    Ok(rows)
                })
            };
            let (plus, minus) = (shift(eps)?, shift(-eps)?);
            if !base_decisions.is_empty() && (op.decisions(&plus)? != base_decisions || op.decisions(&minus)? != base_decisions) {
                continue;
            }
            let fd = (op.value(&plus)? - op.value(&minus)?) / (2.0 * eps);
            let an = grad.data().get(k).copied().unwrap_or(0.0);
            worst = worst.max((fd - an).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Gradient accumulator for the three block kinds of a contrastive batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Slot {
    Query(usize),
    Positive(usize),
    Negative(usize, usize),
}

pub(crate) struct SlotGrads {
    queries: Rows,
    positives: Rows,
    negatives: Vec<Rows>,
}

impl SlotGrads {
    pub(crate) fn new(batch: &ContrastiveBatch) -> Self {
        let d = batch.dim();
        Self {
            queries: Rows::zeros(batch.len(), d),
            positives: Rows::zeros(batch.len(), d),
            negatives: batch
                .hard_negatives()
                .iter()
                .map(|r| Rows::zeros(r.rows(), d))
                .collect(),
        }
    }

    pub(crate) fn add(&mut self, slot: Slot, g: &[f64]) {
        match slot {
            Slot::Query(i) => self.queries.add_to_row(i, g),
            Slot::Positive(i) => self.positives.add_to_row(i, g),
            Slot::Negative(i, k) => self.negatives[i].add_to_row(k, g),
        }
    }

    pub(crate) fn into_map(self) -> BTreeMap<String, Rows> {
        let mut m = BTreeMap::new();
        m.insert(batch::QUERIES.to_string(), self.queries);
        m.insert(batch::POSITIVES.to_string(), self.positives);
        for (i, r) in self.negatives.into_iter().enumerate() {
            m.insert(batch::negative_name(i), r);
        }
        m
    }
}

pub(crate) fn slot_row(batch: &ContrastiveBatch, slot: Slot) -> &[f64] {
    match slot {
        Slot::Query(i) => batch.queries().row(i),
        Slot::Positive(i) => batch.positives().row(i),
        Slot::Negative(i, k) => batch.hard_negatives()[i].row(k),
    }
}
