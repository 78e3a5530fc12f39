//! Embedding quantization: learned-step int8 (LSQ) with straight-through
//! gradients, sign binarization, and the quantization-aware loss combinator.
//!
//! The int8 step `Δ` is one learnable scalar per embedding space. Its
//! gradient follows LSQ: rounding is treated as identity inside the clip
//! range, clipped components contribute `Q_N` or `Q_P`, and the whole
//! `Δ` gradient is scaled by `1/√(dim·Q_P)`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::Rows;
use crate::losses::{EmbeddingBatch, LossResult, Objective};
use crate::vector::{norm, ZERO_NORM};

pub const INT8_QN: i32 = -128;
pub const INT8_QP: i32 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Int8,
    Binary,
}

/// One simulated precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub mode: QuantMode,
    /// Step size, used by `Int8` only.
    pub delta: f64,
    pub qn: i32,
    pub qp: i32,
}

impl QuantConfig {
    pub fn int8(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {delta}")));
        }
        Ok(Self {
            mode: QuantMode::Int8,
            delta,
            qn: INT8_QN,
            qp: INT8_QP,
        })
    }

    pub fn binary() -> Self {
        Self {
            mode: QuantMode::Binary,
            delta: 1.0,
            qn: -1,
            qp: 1,
        }
    }

    /// Int8 config with `Δ = 2·mean(|v|)/√Q_P` over `values`.
    pub fn int8_for(values: &[f64]) -> Result<Self> {
        Self::int8(init_delta(values, INT8_QP))
    }

    /// Gradient scale applied to `Δ`.
    pub fn grad_scale(&self, dim: usize) -> f64 {
        1.0 / ((dim as f64) * f64::from(self.qp)).sqrt()
    }
}

/// LSQ step initialization `2·mean(|v|)/√Q_P`.
pub fn init_delta(values: &[f64], qp: i32) -> f64 {
    let mean = values.iter().map(|x| x.abs()).sum::<f64>() / values.len().max(1) as f64;
    2.0 * mean / f64::from(qp).sqrt()
}

/// Quantized codes plus what is needed to dequantize them.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantizedVector {
    Int8 { codes: Vec<i8>, delta: f64 },
    Binary { bits: Vec<u8>, dim: usize },
}

impl QuantizedVector {
    pub fn dim(&self) -> usize {
        match self {
            QuantizedVector::Int8 { codes, .. } => codes.len(),
            QuantizedVector::Binary { dim, .. } => *dim,
        }
    }

    pub fn dequantize(&self) -> Vec<f64> {
        match self {
            QuantizedVector::Int8 { codes, delta } => codes.iter().map(|&c| f64::from(c) * delta).collect(),
            QuantizedVector::Binary { bits, dim } => (0..*dim)
                .map(|j| if bit(bits, j) { 1.0 } else { -1.0 })
                .collect(),
        }
    }
}

#[inline]
pub(crate) fn bit(bits: &[u8], j: usize) -> bool {
    bits[j / 8] >> (j % 8) & 1 == 1
}

/// `q_j = clip(round(v_j/Δ), Q_N, Q_P)`, `v̂_j = q_j·Δ`, rounding half away from zero.
pub fn lsq_forward(v: &[f64], delta: f64, qn: i32, qp: i32) -> (Vec<f64>, Vec<i32>) {
    let (lo, hi) = (f64::from(qn), f64::from(qp));
    let q: Vec<i32> = v.iter().map(|x| (x / delta).round().clamp(lo, hi) as i32).collect();
    let vhat = q.iter().map(|&c| f64::from(c) * delta).collect();
    (vhat, q)
}

/// Straight-through gradients of `lsq_forward` w.r.t. `v` and `Δ`.
pub fn lsq_grad(v: &[f64], delta: f64, qn: i32, qp: i32, upstream: &[f64]) -> (Vec<f64>, f64) {
    let (lo, hi) = (f64::from(qn), f64::from(qp));
    let scale = 1.0 / ((v.len() as f64) * hi).sqrt();
    let mut grad_delta = 0.0;
    let grad_v = v
        .iter()
        .zip(upstream)
        .map(|(&x, &u)| {
            let r = x / delta;
            if r < lo {
                grad_delta += u * lo;
                0.0
            } else if r > hi {
                grad_delta += u * hi;
                0.0
            } else {
                grad_delta += u * (r.round() - r);
                u
            }
        })
        .collect();
    (grad_v, grad_delta * scale)
}

pub fn quantize_int8(v: &[f64], delta: f64) -> QuantizedVector {
    let (_, q) = lsq_forward(v, delta, INT8_QN, INT8_QP);
    QuantizedVector::Int8 {
        codes: q.into_iter().map(|c| c as i8).collect(),
        delta,
    }
}

/// Packs sign bits LSB-first: bit `j` is set iff `v_j ≥ 0`.
pub fn pack_signs(v: &[f64]) -> Vec<u8> {
    let mut bits = vec![0u8; v.len().div_ceil(8)];
    for (j, &x) in v.iter().enumerate() {
        if x >= 0.0 {
            bits[j / 8] |= 1 << (j % 8);
        }
    }
    bits
}

pub fn quantize_binary(v: &[f64]) -> Result<QuantizedVector> {
    if norm(v) < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(QuantizedVector::Binary {
        bits: pack_signs(v),
        dim: v.len(),
    })
}

pub fn hamming(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Dot product of two ±1 vectors from their packed bits: `dim − 2·hamming`.
pub fn binary_dot(a: &[u8], b: &[u8], dim: usize) -> i64 {
    dim as i64 - 2 * i64::from(hamming(a, b))
}

/// Straight-through binary forward: the sign, with identity gradient on `[-1, 1]`.
fn binary_forward(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x >= 0.0 { 1.0 } else { -1.0 }).collect()
}

fn binary_grad(v: &[f64], upstream: &[f64]) -> Vec<f64> {
    v.iter()
        .zip(upstream)
        .map(|(&x, &u)| if (-1.0..=1.0).contains(&x) { u } else { 0.0 })
        .collect()
}

fn map_rows(rows: &Rows, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Rows {
    let mut data = Vec::with_capacity(rows.data().len());
    for r in rows.iter_rows() {
        data.extend(f(r));
    }
    Rows::new(rows.rows(), rows.dim(), data).expect("row map keeps shape")
}

/// Name of the `Δ` gradient entry for config `c` in a [`Qat`] result.
pub fn delta_grad_name(c: usize) -> String {
    format!("delta/{c}")
}

/// Averages `inner` over the full-precision batch and one copy of the batch
/// per quantization config, every embedding quantized symmetrically.
///
/// Gradients reach full-precision rows through the straight-through
/// estimators; per-config `Δ` gradients are reported as `1×1` entries named
/// by [`delta_grad_name`].
#[derive(Debug, Clone)]
pub struct Qat<L> {
    pub inner: L,
    pub configs: Vec<QuantConfig>,
}

impl<L> Qat<L> {
    pub fn new(inner: L, configs: Vec<QuantConfig>) -> Self {
        Self { inner, configs }
    }

    /// Piecewise-smooth stand-in whose exact derivative equals the
    /// straight-through gradient at `batch`.
    ///
    /// Rounding residuals are frozen at `batch`, so the surrogate's value
    /// there matches [`Qat`] and finite differences around it probe the
    /// estimator rather than the (almost everywhere zero) true derivative.
    pub fn surrogate_at<B: EmbeddingBatch>(&self, batch: &B) -> QatSurrogate<&L> {
        let residuals = self
            .configs
            .iter()
            .map(|c| {
                batch
                    .tensors()
                    .into_iter()
                    .map(|(name, rows)| {
                        let res = map_rows(rows, |r| {
                            r.iter()
                                .map(|&x| match c.mode {
                                    QuantMode::Int8 => {
                                        let xc = (x / c.delta).clamp(f64::from(c.qn), f64::from(c.qp));
                                        xc.round() - xc
                                    }
                                    QuantMode::Binary => {
                                        let s = if x >= 0.0 { 1.0 } else { -1.0 };
                                        s - x.clamp(-1.0, 1.0)
                                    }
                                })
                                .collect()
                        });
                        (name, res)
                    })
                    .collect()
            })
            .collect();
        QatSurrogate {
            inner: &self.inner,
            configs: self.configs.clone(),
            base_deltas: self.configs.iter().map(|c| c.delta).collect(),
            residuals,
        }
    }
}

fn quantize_batch<B: EmbeddingBatch>(batch: &B, c: &QuantConfig) -> Result<B> {
    batch.map_tensors(|_, rows| {
        Ok(match c.mode {
            QuantMode::Int8 => map_rows(rows, |r| lsq_forward(r, c.delta, c.qn, c.qp).0),
            QuantMode::Binary => map_rows(rows, binary_forward),
        })
    })
}

/// Back-propagates a quantized-branch result onto the full-precision rows.
fn backward_through<B: EmbeddingBatch>(
    batch: &B,
    c: &QuantConfig,
    branch: &LossResult,
    weight: f64,
    out: &mut LossResult,
    delta_grad: &mut f64,
) {
    for (name, rows) in batch.tensors() {
        let Some(up) = branch.grads.get(&name) else { continue };
        let dst = out.grads.get_mut(&name).expect("same tensor names");
        for r in 0..rows.rows() {
            let g = match c.mode {
                QuantMode::Int8 => {
                    let (gv, gd) = lsq_grad(rows.row(r), c.delta, c.qn, c.qp, up.row(r));
                    *delta_grad += weight * gd;
                    gv
                }
                QuantMode::Binary => binary_grad(rows.row(r), up.row(r)),
            };
            for (x, y) in dst.row_mut(r).iter_mut().zip(g) {
                *x += weight * y;
            }
        }
    }
}

fn finish(mut out: LossResult, delta_grads: Vec<f64>) -> LossResult {
    for (c, g) in delta_grads.into_iter().enumerate() {
        out.grads
            .insert(delta_grad_name(c), Rows::new(1, 1, vec![g]).expect("1x1"));
    }
    out
}

impl<B: EmbeddingBatch, L: Objective<B>> Objective<B> for Qat<L> {
    fn evaluate(&self, batch: &B) -> Result<LossResult> {
        let weight = 1.0 / (1 + self.configs.len()) as f64;
        let mut out = LossResult::zeros_like(batch);
        out.accumulate(&self.inner.evaluate(batch)?, weight);
        let mut delta_grads = Vec::with_capacity(self.configs.len());
        for c in &self.configs {
            let branch = self.inner.evaluate(&quantize_batch(batch, c)?)?;
            out.value += weight * branch.value;
            let mut gd = 0.0;
            backward_through(batch, c, &branch, weight, &mut out, &mut gd);
            delta_grads.push(gd);
            for w in branch.warnings {
                if !out.warnings.contains(&w) {
                    out.warnings.push(w);
                }
            }
        }
        Ok(finish(out, delta_grads))
    }

    fn value(&self, batch: &B) -> Result<f64> {
        let mut total = self.inner.value(batch)?;
        for c in &self.configs {
            total += self.inner.value(&quantize_batch(batch, c)?)?;
        }
        Ok(total / (1 + self.configs.len()) as f64)
    }

    fn decisions(&self, batch: &B) -> Result<Vec<bool>> {
        let mut out = self.inner.decisions(batch)?;
        for c in &self.configs {
            out.extend(self.inner.decisions(&quantize_batch(batch, c)?)?);
        }
        Ok(out)
    }
}

/// See [`Qat::surrogate_at`].
#[derive(Debug, Clone)]
pub struct QatSurrogate<L> {
    inner: L,
    configs: Vec<QuantConfig>,
    base_deltas: Vec<f64>,
    residuals: Vec<BTreeMap<String, Rows>>,
}

impl<L> QatSurrogate<L> {
    /// Evaluates config `c` at step `delta` while keeping the frozen point.
    ///
    /// The effective step is `Δ₀ + g·(Δ − Δ₀)` with `g` the LSQ gradient
    /// scale, so `∂/∂Δ` of the surrogate is the scaled LSQ gradient.
    pub fn with_delta(mut self, c: usize, delta: f64) -> Self {
        self.configs[c].delta = delta;
        self
    }

    fn effective_delta(&self, c: usize, dim: usize) -> f64 {
        let base = self.base_deltas[c];
        base + self.configs[c].grad_scale(dim) * (self.configs[c].delta - base)
    }

    fn forward<B: EmbeddingBatch>(&self, batch: &B, c: usize) -> Result<B> {
        let cfg = self.configs[c];
        let step = self.effective_delta(c, batch.dim());
        let (lo, hi) = (f64::from(cfg.qn), f64::from(cfg.qp));
        batch.map_tensors(|name, rows| {
            let res = &self.residuals[c][name];
            let mut data = Vec::with_capacity(rows.data().len());
            for (x, r) in rows.data().iter().zip(res.data()) {
                data.push(match cfg.mode {
                    QuantMode::Int8 => step * ((x / step).clamp(lo, hi) + r),
                    QuantMode::Binary => x.clamp(-1.0, 1.0) + r,
                });
            }
            Rows::new(rows.rows(), rows.dim(), data)
        })
    }
}

impl<B: EmbeddingBatch, L: Objective<B>> Objective<B> for QatSurrogate<L> {
    fn evaluate(&self, batch: &B) -> Result<LossResult> {
        let qat = Qat {
            inner: &self.inner,
            configs: self.configs.clone(),
        };
        qat.evaluate(batch)
    }

    fn value(&self, batch: &B) -> Result<f64> {
        let mut total = self.inner.value(batch)?;
        for c in 0..self.configs.len() {
            total += self.inner.value(&self.forward(batch, c)?)?;
        }
        Ok(total / (1 + self.configs.len()) as f64)
    }

    fn decisions(&self, batch: &B) -> Result<Vec<bool>> {
        let mut out = self.inner.decisions(batch)?;
        for c in 0..self.configs.len() {
            out.extend(self.inner.decisions(&self.forward(batch, c)?)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lsq_forward_examples() {
        let (vhat, q) = lsq_forward(&[0.0; 4], 0.5, INT8_QN, INT8_QP);
        assert_eq!(vhat, vec![0.0; 4]);
        assert_eq!(q, vec![0; 4]);

        let (vhat, q) = lsq_forward(&[127.7], 1.0, INT8_QN, INT8_QP);
        assert_eq!((vhat[0], q[0]), (127.0, 127));

        let (vhat, q) = lsq_forward(&[0.24, -0.26], 0.1, INT8_QN, INT8_QP);
        assert_eq!(q, vec![2, -3]);
        assert!((vhat[0] - 0.2).abs() < 1e-15 && (vhat[1] + 0.3).abs() < 1e-15);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let (_, q) = lsq_forward(&[0.5, -0.5, 1.5, -2.5], 1.0, INT8_QN, INT8_QP);
        assert_eq!(q, vec![1, -1, 2, -3]);
    }

    #[test]
    fn lsq_grad_pass_through_and_clip() {
        let v = [0.1, -0.3, 0.25];
        let (gv, _) = lsq_grad(&v, 0.1, INT8_QN, INT8_QP, &[1.0; 3]);
        assert_eq!(gv, vec![1.0; 3]);

        let v = [200.0, 0.4];
        let up = [2.0, 1.0];
        let (gv, gd) = lsq_grad(&v, 1.0, INT8_QN, INT8_QP, &up);
        assert_eq!(gv, vec![0.0, 1.0]);
        let scale = 1.0 / (2.0f64 * 127.0).sqrt();
        let expected = (127.0 * 2.0 + (0.0 - 0.4) * 1.0) * scale;
        assert!((gd - expected).abs() < 1e-15);
    }

    #[test]
    fn binary_examples() {
        let q = quantize_binary(&[0.3, -0.2, 0.0, -0.7]).unwrap();
        assert_eq!(q.dequantize(), vec![1.0, -1.0, 1.0, -1.0]);
        match &q {
            QuantizedVector::Binary { bits, .. } => assert_eq!(bits, &vec![0b0101]),
            _ => unreachable!(),
        }
        let all = quantize_binary(&[0.1; 11]).unwrap();
        assert_eq!(all.dequantize(), vec![1.0; 11]);
        assert!(matches!(quantize_binary(&[0.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn init_delta_convention() {
        let d = init_delta(&[1.0, -3.0], 127);
        assert!((d - 4.0 / 127f64.sqrt()).abs() < 1e-15);
    }
}
