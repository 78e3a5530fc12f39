//! Seeded random batches and a finite-difference sweep over every objective.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    grad_check, Classification, CoSent, ContrastiveBatch, Distill, DistillBatch, EmbeddingBatch, Matryoshka,
    Objective, RetrievalInfoNce, Stage, StsBatch,
};
use crate::matrix::Rows;
use crate::quant::{delta_grad_name, Qat, QuantConfig};

/// Size limits of a random batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchShape {
    pub max_rows: usize,
    pub max_dim: usize,
    pub max_negatives: usize,
}

impl Default for BatchShape {
    fn default() -> Self {
        Self {
            max_rows: 8,
            max_dim: 32,
            max_negatives: 4,
        }
    }
}

pub fn batch_rng(seed: u64, batch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch);
    rng
}

fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Rows {
    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    Rows::new(rows, dim, data).expect("shape")
}

fn temperature(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0.05..1.0)
}

pub fn random_contrastive(rng: &mut ChaCha8Rng, shape: BatchShape, stage: Stage) -> Result<ContrastiveBatch> {
    let n = rng.random_range(1..=shape.max_rows);
    let d = rng.random_range(2..=shape.max_dim);
    let q = gaussian_rows(rng, n, d);
    let p = gaussian_rows(rng, n, d);
    let negs = (0..n)
        .map(|_| {
            let k = rng.random_range(0..=shape.max_negatives);
            gaussian_rows(rng, k, d)
        })
        .collect();
    let tau = temperature(rng);
    ContrastiveBatch::new(q, p, negs, tau, stage)
}

pub fn random_sts(rng: &mut ChaCha8Rng, shape: BatchShape) -> Result<StsBatch> {
    let n = rng.random_range(2..=shape.max_rows.max(2));
    let d = rng.random_range(2..=shape.max_dim);
    let q = gaussian_rows(rng, n, d);
    let p = gaussian_rows(rng, n, d);
    // a coarse grid so that ties occur
    let scores = (0..n).map(|_| f64::from(rng.random_range(0..=5u8))).collect();
    let tau = temperature(rng);
    StsBatch::new(q, p, scores, tau)
}

pub fn random_distill(rng: &mut ChaCha8Rng, shape: BatchShape) -> Result<DistillBatch> {
    let n = rng.random_range(1..=shape.max_rows);
    let d = rng.random_range(2..=shape.max_dim);
    let q = gaussian_rows(rng, n, d);
    let mut cands = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    for _ in 0..n {
        let m = rng.random_range(2..=shape.max_negatives.max(1) + 1);
        cands.push(gaussian_rows(rng, m, d));
        logits.push((0..m).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect());
    }
    DistillBatch::new(q, cands, logits)
}

/// The base objectives covered by the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    InfonceStage1,
    InfonceStage2,
    Classification,
    Cosent,
    Distill,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::InfonceStage1,
        LossKind::InfonceStage2,
        LossKind::Classification,
        LossKind::Cosent,
        LossKind::Distill,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::InfonceStage1 => "infonce-stage1",
            LossKind::InfonceStage2 => "infonce-stage2",
            LossKind::Classification => "classification",
            LossKind::Cosent => "cosent",
            LossKind::Distill => "distill",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss `{s}`")))
    }
}

/// How the base objective is wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wrapper {
    Plain,
    /// Matryoshka over `{⌈D/4⌉, ⌈D/2⌉, D}` (deduplicated).
    Mrl,
    /// Quantization-aware with one Int8 and one Binary config.
    Qat,
}

impl Wrapper {
    pub const ALL: [Wrapper; 3] = [Wrapper::Plain, Wrapper::Mrl, Wrapper::Qat];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: LossKind,
    pub wrapper: Wrapper,
    pub batches: usize,
    /// Largest relative error over all embedding components.
    pub max_rel_error: f64,
    /// Largest relative error of the Int8 step-size gradient (QAT only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_delta_rel_error: Option<f64>,
}

fn mrl_dims(d: usize) -> Vec<usize> {
    let mut dims = vec![d.div_ceil(4), d.div_ceil(2), d];
    dims.dedup();
    dims
}

fn qat_configs<B: EmbeddingBatch>(batch: &B) -> Result<Vec<QuantConfig>> {
    let values: Vec<f64> = batch.tensors().iter().flat_map(|(_, r)| r.data().iter().copied()).collect();
    Ok(vec![QuantConfig::int8_for(&values)?, QuantConfig::binary()])
}

/// Central difference of the surrogate in the Int8 step size against the
/// analytic `Δ` gradient.
fn delta_error<B, L>(qat: &Qat<L>, batch: &B, eps: f64) -> Result<f64>
where
    B: EmbeddingBatch,
    L: Objective<B>,
{
    let an = qat.evaluate(batch)?.grads[&delta_grad_name(0)].data()[0];
    let delta = qat.configs[0].delta;
    let h = eps * delta.max(1.0);
    let plus = qat.surrogate_at(batch).with_delta(0, delta + h).value(batch)?;
    let minus = qat.surrogate_at(batch).with_delta(0, delta - h).value(batch)?;
    let fd = (plus - minus) / (2.0 * h);
    Ok((fd - an).abs() / fd.abs().max(1.0))
}

fn check_one<B, L>(inner: L, wrapper: Wrapper, batch: &B, eps: f64) -> Result<(f64, Option<f64>)>
where
    B: EmbeddingBatch,
    L: Objective<B>,
{
    match wrapper {
        Wrapper::Plain => Ok((grad_check(&inner, batch, eps)?, None)),
        Wrapper::Mrl => Ok((grad_check(&Matryoshka::new(inner, mrl_dims(batch.dim())), batch, eps)?, None)),
        Wrapper::Qat => {
            let qat = Qat::new(inner, qat_configs(batch)?);
            let e = grad_check(&qat.surrogate_at(batch), batch, eps)?;
            Ok((e, Some(delta_error(&qat, batch, eps)?)))
        }
    }
}

/// Checks one seeded batch; the batch index selects an independent RNG stream.
pub fn check_batch(loss: LossKind, wrapper: Wrapper, seed: u64, index: u64, shape: BatchShape, eps: f64) -> Result<(f64, Option<f64>)> {
    let mut rng = batch_rng(seed, index);
    match loss {
        LossKind::InfonceStage1 => check_one(RetrievalInfoNce, wrapper, &random_contrastive(&mut rng, shape, Stage::Stage1)?, eps),
        LossKind::InfonceStage2 => check_one(RetrievalInfoNce, wrapper, &random_contrastive(&mut rng, shape, Stage::Stage2)?, eps),
        LossKind::Classification => check_one(Classification, wrapper, &random_contrastive(&mut rng, shape, Stage::Stage1)?, eps),
        LossKind::Cosent => check_one(CoSent, wrapper, &random_sts(&mut rng, shape)?, eps),
        LossKind::Distill => check_one(Distill::default(), wrapper, &random_distill(&mut rng, shape)?, eps),
    }
}

/// Runs `batches` seeded checks of one (loss, wrapper) pair. Batches run on
/// the current rayon pool; the result does not depend on its size.
pub fn run_grad_check(loss: LossKind, wrapper: Wrapper, batches: usize, seed: u64, shape: BatchShape, eps: f64) -> Result<GradCheckReport> {
    let errors = (0..batches as u64)
        .into_par_iter()
        .map(|b| check_batch(loss, wrapper, seed, b, shape, eps))
        .collect::<Result<Vec<_>>>()?;
    let max_rel_error = errors.iter().map(|e| e.0).fold(0.0, f64::max);
    let max_delta_rel_error = (wrapper == Wrapper::Qat).then(|| errors.iter().filter_map(|e| e.1).fold(0.0, f64::max));
    Ok(GradCheckReport {
        loss,
        wrapper,
        batches,
        max_rel_error,
        max_delta_rel_error,
    })
}
