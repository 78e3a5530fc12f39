//! Dense vector primitives shared by every module.

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-30;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ‖v‖₂`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("vector".into()));
    }
    let n = norm(v);
    if n < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity between two vectors, bounded to [-1, 1] up to rounding.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<SimilarityScore> for f64 {
    fn from(s: SimilarityScore) -> f64 {
        s.0
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<SimilarityScore> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(SimilarityScore(dot(a, b) / (na * nb)))
}

/// Cosine similarity with its gradient w.r.t. both arguments.
///
/// `∂s/∂a = b/(‖a‖‖b‖) − s·a/‖a‖²`, symmetric for `b`.
pub(crate) fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    let inv = 1.0 / (na * nb);
    let s = dot(a, b) * inv;
    let ka = s / (na * na);
    let kb = s / (nb * nb);
    let ga = a.iter().zip(b).map(|(x, y)| y * inv - ka * x).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x * inv - kb * y).collect();
    (s, ga, gb)
}

/// Plain cosine without error checks, for hot loops whose inputs are validated upstream.
#[inline]
pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Back-propagates `grad` (w.r.t. `x/‖x‖`) to `x`.
pub(crate) fn normalize_backward(x: &[f64], grad: &[f64]) -> Vec<f64> {
    let n = norm(x);
    let g_dot_y = dot(grad, x) / n;
    grad.iter()
        .zip(x)
        .map(|(g, xi)| (g - g_dot_y * xi / n) / n)
        .collect()
}

/// Numerically stable `ln Σ exp(x_i)`.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of `xs`.
pub(crate) fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}
