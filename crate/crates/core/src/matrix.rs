//! Row-major embedding storage.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::vector;

/// A dense row-major block of `rows × dim` values with no identity attached.
///
/// This is what the losses differentiate against; gradients come back in the
/// same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Rows {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Rows {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::DimMismatch {
                expected: rows * dim,
                actual: data.len(),
            });
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_vecs(dim: usize, vecs: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(vecs.len() * dim);
        for v in vecs {
            if v.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            data.extend_from_slice(v);
        }
        Ok(Self {
            rows: vecs.len(),
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics
        let dim = self.dim.max(1);
        self.data.chunks_exact(dim).take(self.rows)
    }

    /// Adds `g` into row `i`.
    pub(crate) fn add_to_row(&mut self, i: usize, g: &[f64]) {
        for (x, y) in self.row_mut(i).iter_mut().zip(g) {
            *x += y;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// L2-normalizes every row.
    pub fn normalized(&self) -> Result<Self> {
        let mut out = Vec::with_capacity(self.data.len());
        for r in self.iter_rows() {
            out.extend(vector::l2_normalize(r)?);
        }
        Ok(Self {
            rows: self.rows,
            dim: self.dim,
            data: out,
        })
    }

    /// Keeps the first `d` components of every row.
    pub fn prefix(&self, d: usize) -> Self {
        let d = d.min(self.dim);
        let mut out = Vec::with_capacity(self.rows * d);
        for r in self.iter_rows() {
            out.extend_from_slice(&r[..d]);
        }
        Self {
            rows: self.rows,
            dim: d,
            data: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Rows) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `rows × dim` float64 matrix whose rows carry unique string ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Rows,
    ids: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        let values = Rows::new(ids.len(), dim, data)?;
        Self::from_rows(ids, values)
    }

    pub fn from_rows(ids: Vec<String>, values: Rows) -> Result<Self> {
        if ids.len() != values.rows() {
            return Err(Error::DimMismatch {
                expected: values.rows(),
                actual: ids.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        if let Some(pos) = values.data().iter().position(|x| !x.is_finite()) {
            let row = pos / values.dim().max(1);
            return Err(Error::NonFinite(format!("row `{}`", ids[row])));
        }
        Ok(Self { values, ids })
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.dim()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn values(&self) -> &Rows {
        &self.values
    }

    pub fn data(&self) -> &[f64] {
        self.values.data()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn normalized(&self) -> Result<Self> {
        Ok(Self {
            values: self.values.normalized()?,
            ids: self.ids.clone(),
        })
    }

    /// First `n` rows, used to cap benchmark query sets.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.rows());
        Self {
            values: Rows {
                rows: n,
                dim: self.dim(),
                data: self.values.data[..n * self.dim()].to_vec(),
            },
            ids: self.ids[..n].to_vec(),
        }
    }

    pub fn into_parts(self) -> (Vec<String>, Rows) {
        (self.ids, self.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_is_checked() {
        assert!(Rows::new(2, 3, vec![0.0; 5]).is_err());
        assert!(EmbeddingMatrix::new(vec!["a".into()], 2, vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = EmbeddingMatrix::new(vec!["a".into(), "a".into()], 1, vec![1.0, 2.0]);
        assert!(matches!(err, Err(Error::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn non_finite_rejected() {
        let err = EmbeddingMatrix::new(vec!["a".into(), "b".into()], 1, vec![1.0, f64::NAN]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn prefix_and_normalize() {
        let r = Rows::new(2, 3, vec![3.0, 4.0, 9.0, 0.0, 2.0, 1.0]).unwrap();
        let p = r.prefix(2).normalized().unwrap();
        assert_eq!(p.dim(), 2);
        assert!((p.row(0)[0] - 0.6).abs() < 1e-15);
        assert_eq!(p.row(1), &[0.0, 1.0]);
    }
}
