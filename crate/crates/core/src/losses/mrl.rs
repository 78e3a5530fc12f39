//! Matryoshka wrapper: average an inner loss over re-normalized prefixes.

use crate::error::{Error, Result};
use crate::matrix::Rows;
use crate::vector::normalize_backward;

use super::{EmbeddingBatch, LossResult, Objective};

/// Evaluates `inner` on the first `d` components of every row for each `d`
/// in `dims` and averages the results.
#[derive(Debug, Clone)]
pub struct Matryoshka<L> {
    pub inner: L,
    pub dims: Vec<usize>,
}

impl<L> Matryoshka<L> {
    pub fn new(inner: L, dims: Vec<usize>) -> Self {
        Self { inner, dims }
    }

    fn check(&self, full: usize) -> Result<()> {
        let ascending = self.dims.windows(2).all(|w| w[0] < w[1]);
        let in_range = self.dims.iter().all(|&d| (1..=full).contains(&d));
        if self.dims.is_empty() || !ascending || !in_range || self.dims.last() != Some(&full) {
            return Err(Error::BadDims {
                dims: self.dims.clone(),
                full,
            });
        }
        Ok(())
    }
}

fn truncate<B: EmbeddingBatch>(batch: &B, d: usize) -> Result<B> {
    batch.map_tensors(|_, rows| {
        if rows.is_empty() {
            return Ok(Rows::zeros(0, d));
        }
        rows.prefix(d).normalized()
    })
}

impl<B: EmbeddingBatch, L: Objective<B>> Objective<B> for Matryoshka<L> {
    fn evaluate(&self, batch: &B) -> Result<LossResult> {
        self.check(batch.dim())?;
        let weight = 1.0 / self.dims.len() as f64;
        let mut out = LossResult::zeros_like(batch);
        for &d in &self.dims {
            let inner = self.inner.evaluate(&truncate(batch, d)?)?;
            out.value += weight * inner.value;
            for (name, rows) in batch.tensors() {
                let Some(g) = inner.grads.get(&name) else { continue };
                let dst = out.grads.get_mut(&name).expect("same tensor names");
                for r in 0..rows.rows() {
                    let back = normalize_backward(&rows.row(r)[..d], g.row(r));
                    for (x, b) in dst.row_mut(r)[..d].iter_mut().zip(back) {
                        *x += weight * b;
                    }
                }
            }
            for w in inner.warnings {
                if !out.warnings.contains(&w) {
                    out.warnings.push(w);
                }
            }
        }
        Ok(out)
    }

    fn value(&self, batch: &B) -> Result<f64> {
        self.check(batch.dim())?;
        let mut total = 0.0;
        for &d in &self.dims {
            total += self.inner.value(&truncate(batch, d)?)?;
        }
        Ok(total / self.dims.len() as f64)
    }

    fn decisions(&self, batch: &B) -> Result<Vec<bool>> {
        let mut out = Vec::new();
        for &d in &self.dims {
            out.extend(self.inner.decisions(&truncate(batch, d)?)?);
        }
        Ok(out)
    }
}

/// Functional form of [`Matryoshka`].
pub fn mrl_wrap<B, L>(inner: &L, batch: &B, dims: &[usize]) -> Result<LossResult>
where
    B: EmbeddingBatch,
    L: Objective<B>,
{
    Matryoshka::new(inner, dims.to_vec()).evaluate(batch)
}
