//! CoSent ranking loss over pairs of scored pairs.

use crate::error::Result;
use crate::matrix::Rows;
use crate::vector::{cosine_unchecked, cosine_with_grad, log_sum_exp, softmax};

use super::batch::{StsBatch, DOCUMENTS, QUERIES};
use super::{LossResult, Objective};

/// Logits `(cos_b − cos_a)/τ` for every ordered pair with `ŝ_a > ŝ_b`,
/// preceded by the constant `0` that stands for the `1 +` inside the log.
fn violations(batch: &StsBatch, cos: &[f64]) -> (Vec<f64>, Vec<(usize, usize)>) {
    let s = batch.scores();
    let tau = batch.temperature();
    let mut logits = vec![0.0];
    let mut pairs = Vec::new();
    for a in 0..s.len() {
        for b in 0..s.len() {
            if s[a] > s[b] {
                logits.push((cos[b] - cos[a]) / tau);
                pairs.push((a, b));
            }
        }
    }
    (logits, pairs)
}

fn pair_cosines(batch: &StsBatch) -> Vec<f64> {
    (0..batch.len())
        .map(|p| cosine_unchecked(batch.queries().row(p), batch.documents().row(p)))
        .collect()
}

/// `log(1 + Σ_{ŝ_a > ŝ_b} exp((cos_b − cos_a)/τ))`.
pub fn cosent_loss(batch: &StsBatch) -> Result<LossResult> {
    let cos = pair_cosines(batch);
    let (logits, pairs) = violations(batch, &cos);
    let value = log_sum_exp(&logits);
    let weights = softmax(&logits);
    let tau = batch.temperature();

    // dL/dcos_p
    let mut dcos = vec![0.0; batch.len()];
    for (w, &(a, b)) in weights[1..].iter().zip(&pairs) {
        dcos[b] += w / tau;
        dcos[a] -= w / tau;
    }
    let d = batch.queries().dim();
    let mut gq = Rows::zeros(batch.len(), d);
    let mut gd = Rows::zeros(batch.len(), d);
    for (p, &c) in dcos.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let (_, ga, gb) = cosine_with_grad(batch.queries().row(p), batch.documents().row(p));
        gq.add_to_row(p, &ga.iter().map(|x| x * c).collect::<Vec<_>>());
        gd.add_to_row(p, &gb.iter().map(|x| x * c).collect::<Vec<_>>());
    }
    Ok(LossResult {
        value,
        grads: [(QUERIES.to_string(), gq), (DOCUMENTS.to_string(), gd)].into(),
        warnings: Vec::new(),
    })
}

/// [`cosent_loss`] as an [`Objective`].
#[derive(Debug, Clone, Copy, Default)]
pub struct CoSent;

impl Objective<StsBatch> for CoSent {
    fn evaluate(&self, batch: &StsBatch) -> Result<LossResult> {
        cosent_loss(batch)
    }

    fn value(&self, batch: &StsBatch) -> Result<f64> {
        let cos = pair_cosines(batch);
        Ok(log_sum_exp(&violations(batch, &cos).0))
    }
}
