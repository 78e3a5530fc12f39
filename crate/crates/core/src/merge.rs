//! Weighted linear merging of checkpoints represented as named f64 arrays.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_sections, write_atomic, write_sections};
use crate::matrix::Rows;

/// Named parameter arrays. The manifest is the set of names with their shapes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    arrays: BTreeMap<String, Rows>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_arrays(arrays: impl IntoIterator<Item = (String, Rows)>) -> Result<Self> {
        let mut set = Self::new();
        for (name, rows) in arrays {
            set.insert(name, rows)?;
        }
        Ok(set)
    }

    /// Fails on non-finite values or a repeated name.
    pub fn insert(&mut self, name: impl Into<String>, rows: Rows) -> Result<()> {
        let name = name.into();
        if !rows.is_finite() {
            return Err(Error::NonFinite(name));
        }
        if self.arrays.contains_key(&name) {
            return Err(Error::DuplicateId(name));
        }
        self.arrays.insert(name, rows);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Rows> {
        self.arrays.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Rows)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// `(name, rows, dim)` per array, in name order.
    pub fn manifest(&self) -> Vec<(&str, usize, usize)> {
        self.iter().map(|(n, r)| (n, r.rows(), r.dim())).collect()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::from_arrays(self.arrays.iter().map(|(n, r)| {
            let data = r.data().iter().map(|x| x * c).collect();
            (n.clone(), Rows::new(r.rows(), r.dim(), data).expect("same shape"))
        }))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let sections: Vec<(&str, &Rows)> = self.iter().collect();
        write_atomic(path.as_ref(), |f| {
            let mut w = BufWriter::new(f);
            write_sections(&mut w, &sections)?;
            w.flush()?;
            Ok(())
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let sections = read_sections(&mut BufReader::new(File::open(path)?))?;
        Self::from_arrays(sections)
    }
}

fn normalized_weights(weights: &[f64], n: usize) -> Result<Vec<f64>> {
    if weights.len() != n {
        return Err(Error::InvalidArgument(format!("{} weights for {n} inputs", weights.len())));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("merge weights".into()));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidArgument("merge weights must be non-negative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::InvalidArgument("merge weights sum to zero".into()));
    }
    Ok(weights.iter().map(|w| w / sum).collect())
}

/// Elementwise `Σ wᵢ · inputᵢ` with weights normalized to sum to one.
/// Zero-weight inputs are skipped, so a one-hot weight vector returns its
/// input bit for bit.
pub fn merge_checkpoints(inputs: &[ParamSet], weights: &[f64]) -> Result<ParamSet> {
    if inputs.len() < 2 {
        return Err(Error::InvalidArgument("merging needs at least two inputs".into()));
    }
    let w = normalized_weights(weights, inputs.len())?;
    let manifest = inputs[0].manifest();
    for (i, p) in inputs.iter().enumerate().skip(1) {
        if p.manifest() != manifest {
            return Err(Error::ManifestMismatch(format!("input {i} differs from input 0")));
        }
    }
    let active: Vec<(f64, &ParamSet)> = w.iter().copied().zip(inputs).filter(|(w, _)| *w > 0.0).collect();
    let mut out = ParamSet::new();
    for (name, rows, dim) in manifest {
        let mut acc: Option<Vec<f64>> = None;
        for &(wi, p) in &active {
            let src = p.arrays[name].data();
            match acc.as_mut() {
                None if wi == 1.0 => acc = Some(src.to_vec()),
                None => acc = Some(src.iter().map(|x| wi * x).collect()),
                Some(a) => a.iter_mut().zip(src).for_each(|(a, x)| *a += wi * x),
            }
        }
        let data = acc.expect("at least one positive weight");
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        out.arrays.insert(name.to_string(), Rows::new(rows, dim, data)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeSearchResult {
    pub params: ParamSet,
    pub weights: Vec<f64>,
    pub objective: f64,
    /// Objective value per candidate, in candidate order.
    pub scores: Vec<f64>,
}

/// Evaluates every candidate weight vector and keeps the maximizer; the
/// earliest candidate wins ties.
pub fn grid_search_merge<F>(inputs: &[ParamSet], candidates: &[Vec<f64>], mut objective: F) -> Result<MergeSearchResult>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate weights".into()));
    }
    let mut best: Option<(usize, ParamSet, f64)> = None;
    let mut scores = Vec::with_capacity(candidates.len());
    for (i, w) in candidates.iter().enumerate() {
        let merged = merge_checkpoints(inputs, w)?;
        let v = objective(&merged)?;
        if v.is_nan() {
            return Err(Error::NonFinite(format!("objective for candidate {i}")));
        }
        scores.push(v);
        if best.as_ref().is_none_or(|b| v > b.2) {
            best = Some((i, merged, v));
        }
    }
    let (i, params, objective) = best.expect("non-empty candidates");
    Ok(MergeSearchResult {
        params,
        weights: candidates[i].clone(),
        objective,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(vals: &[f64]) -> ParamSet {
        ParamSet::from_arrays([("w".to_string(), Rows::new(1, vals.len(), vals.to_vec()).unwrap())]).unwrap()
    }

    #[test]
    fn one_hot_is_exact() {
        let a = set(&[-0.0, 1.5, 0.1]);
        let b = set(&[7.0, -2.0, 3.0]);
        let m = merge_checkpoints(&[a.clone(), b.clone()], &[1.0, 0.0]).unwrap();
        let bits = |p: &ParamSet| p.get("w").unwrap().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&a));
        let m = merge_checkpoints(&[a, b.clone()], &[0.0, 3.0]).unwrap();
        assert_eq!(bits(&m), bits(&b));
    }

    #[test]
    fn opposite_inputs_cancel() {
        let a = set(&[0.3, -1.7, 2.5]);
        let m = merge_checkpoints(&[a.clone(), a.scaled(-1.0).unwrap()], &[0.5, 0.5]).unwrap();
        assert!(m.get("w").unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn errors() {
        let a = set(&[1.0]);
        let b = set(&[1.0, 2.0]);
        assert!(matches!(merge_checkpoints(&[a.clone(), b], &[0.5, 0.5]), Err(Error::ManifestMismatch(_))));
        assert!(merge_checkpoints(std::slice::from_ref(&a), &[1.0]).is_err());
        assert!(merge_checkpoints(&[a.clone(), a.clone()], &[-1.0, 2.0]).is_err());
        assert!(merge_checkpoints(&[a.clone(), a.clone()], &[0.0, 0.0]).is_err());
        assert!(merge_checkpoints(&[a.clone(), a.clone()], &[1.0]).is_err());
        let big = set(&[f64::MAX]);
        assert!(merge_checkpoints(&[big.clone(), big], &[0.5, 0.5]).is_ok());
        assert!(matches!(ParamSet::from_arrays([("x".into(), Rows::new(1, 1, vec![f64::NAN]).unwrap())]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn grid_search_ties_pick_first() {
        let a = set(&[1.0]);
        let b = set(&[2.0]);
        let cands = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = grid_search_merge(&[a.clone(), b.clone()], &cands, |_| Ok(1.0)).unwrap();
        assert_eq!(r.weights, cands[0]);
        let r = grid_search_merge(&[a, b], &cands[1..], |_| Ok(0.0)).unwrap();
        assert_eq!(r.weights, cands[1]);
    }
}
