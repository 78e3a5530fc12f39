//! Exact exhaustive search over prefix-truncated, quantized embeddings.
//!
//! Storage per vector: F32 `4·dim`, F64 `8·dim`, Int8 `dim + 4` (codes plus an
//! f32 max-abs scale), Binary `ceil(dim/8)`. The serialized index is an
//! embedding file whose size is `storage_bytes() + metadata_bytes()`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, EmbeddingFile, Payload};
use crate::matrix::EmbeddingMatrix;
use crate::metrics::{Hit, RankedList, RetrievalRun};
use crate::mining::rank_order;
use crate::vector::l2_normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
    Int8,
    Binary,
}

impl Precision {
    pub const ALL: [Precision; 4] = [Precision::F32, Precision::F64, Precision::Int8, Precision::Binary];

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
            Precision::Int8 => "int8",
            Precision::Binary => "binary",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            "int8" | "i8" => Ok(Precision::Int8),
            "binary" | "bit" => Ok(Precision::Binary),
            other => Err(Error::InvalidArgument(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSpec {
    pub dim: usize,
    pub precision: Precision,
}

impl IndexSpec {
    pub fn new(dim: usize, precision: Precision) -> Self {
        Self { dim, precision }
    }

    pub fn bytes_per_vector(&self) -> usize {
        self.dtype().row_bytes(self.dim)
    }

    fn dtype(&self) -> io::Dtype {
        match self.precision {
            Precision::F32 => io::Dtype::F32,
            Precision::F64 => io::Dtype::F64,
            Precision::Int8 => io::Dtype::I8Scaled,
            Precision::Binary => io::Dtype::Bit,
        }
    }
}

#[derive(Debug, Clone)]
enum Store {
    F32 { data: Vec<f32>, norms: Vec<f64> },
    F64 { data: Vec<f64>, norms: Vec<f64> },
    Int8 { codes: Vec<i8>, scales: Vec<f32>, norms: Vec<f64> },
    Binary { words: Vec<u64>, stride: usize },
}

/// An immutable index; safe to search from many threads.
#[derive(Debug, Clone)]
pub struct QuantizedIndex {
    spec: IndexSpec,
    ids: Vec<String>,
    store: Store,
}

/// A query encoded once for repeated scoring.
#[derive(Debug, Clone)]
pub enum PreparedQuery {
    F32(Vec<f32>, f64),
    F64(Vec<f64>, f64),
    Int8(Vec<i8>, f64),
    Binary(Vec<u64>),
}

fn f64_norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Symmetric per-vector int8 codes with scale `max|v| / 127`.
pub fn int8_max_abs(v: &[f64]) -> (Vec<i8>, f32) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return (vec![0; v.len()], 0.0);
    }
    let scale = max / 127.0;
    let codes = v.iter().map(|x| (x / scale).round().clamp(-127.0, 127.0) as i8).collect();
    (codes, scale as f32)
}

fn sign_words(v: &[f64]) -> Vec<u64> {
    let mut words = vec![0u64; v.len().div_ceil(64)];
    for (j, &x) in v.iter().enumerate() {
        if x >= 0.0 {
            words[j / 64] |= 1 << (j % 64);
        }
    }
    words
}

fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 16];
    let (ac, ar) = a.split_at(a.len() / 16 * 16);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(16).zip(bc.chunks_exact(16)) {
        for l in 0..16 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    acc.iter().sum::<f32>() + tail
}

fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0f64; 4];
    let (ac, ar) = a.split_at(a.len() / 4 * 4);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f64;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
    let mut acc = [0i32; 16];
    let (ac, ar) = a.split_at(a.len() / 16 * 16);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(16).zip(bc.chunks_exact(16)) {
        for l in 0..16 {
            // codes lie in ±127, so a lane cannot overflow below ~2M dims
            acc[l] = acc[l].wrapping_add((x[l] as i32).wrapping_mul(y[l] as i32));
        }
    }
    let tail: i32 = ar.iter().zip(br).map(|(&x, &y)| x as i32 * y as i32).sum();
    acc.iter().fold(tail, |s, &v| s.wrapping_add(v))
}

fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Keeps the best `k` (score, position) pairs by descending score, then id.
struct TopK<'a> {
    k: usize,
    ids: &'a [String],
    best: Vec<(f64, usize)>,
}

impl<'a> TopK<'a> {
    fn new(k: usize, ids: &'a [String]) -> Self {
        Self {
            k,
            ids,
            best: Vec::with_capacity(k + 1),
        }
    }

    fn before(&self, a: (f64, usize), b: (f64, usize)) -> bool {
        rank_order((a.0, &self.ids[a.1]), (b.0, &self.ids[b.1])).is_lt()
    }

    #[inline]
    fn push(&mut self, score: f64, i: usize) {
        if self.best.len() == self.k {
            match self.best.last() {
                Some(&worst) if self.before((score, i), worst) => {}
                _ => return,
            }
        }
        let pos = self.best.partition_point(|&e| self.before(e, (score, i)));
        self.best.insert(pos, (score, i));
        self.best.truncate(self.k);
    }

    fn into_hits(self) -> Vec<Hit> {
        self.best
            .into_iter()
            .map(|(score, i)| Hit {
                doc: self.ids[i].clone(),
                score,
            })
            .collect()
    }
}

/// Truncates every row to `spec.dim`, re-normalizes it and encodes it.
pub fn build_index(emb: &EmbeddingMatrix, spec: IndexSpec) -> Result<QuantizedIndex> {
    if spec.dim == 0 || spec.dim > emb.dim() {
        return Err(Error::BadDim {
            dim: spec.dim,
            full: emb.dim(),
        });
    }
    let d = spec.dim;
    let n = emb.rows();
    let prefix = |i: usize| l2_normalize(&emb.row(i)[..d]);
    let store = match spec.precision {
        Precision::F32 => {
            let mut data = vec![0f32; n * d];
            data.par_chunks_mut(d).enumerate().try_for_each(|(i, row)| {
                row.iter_mut().zip(prefix(i)?).for_each(|(o, x)| *o = x as f32);
                Ok::<_, Error>(())
            })?;
            let norms = data.par_chunks(d).map(|r| f64_norm(r.iter().map(|&x| x as f64))).collect();
            Store::F32 { data, norms }
        }
        Precision::F64 => {
            let mut data = vec![0f64; n * d];
            data.par_chunks_mut(d).enumerate().try_for_each(|(i, row)| {
                row.copy_from_slice(&prefix(i)?);
                Ok::<_, Error>(())
            })?;
            let norms = data.par_chunks(d).map(|r| f64_norm(r.iter().copied())).collect();
            Store::F64 { data, norms }
        }
        Precision::Int8 => {
            let mut codes = vec![0i8; n * d];
            let mut scales = vec![0f32; n];
            codes
                .par_chunks_mut(d)
                .zip(scales.par_iter_mut())
                .enumerate()
                .try_for_each(|(i, (row, scale))| {
                    let (c, s) = int8_max_abs(&prefix(i)?);
                    row.copy_from_slice(&c);
                    *scale = s;
                    Ok::<_, Error>(())
                })?;
            let norms = codes.par_chunks(d).map(|r| f64_norm(r.iter().map(|&x| x as f64))).collect();
            Store::Int8 { codes, scales, norms }
        }
        Precision::Binary => {
            let stride = d.div_ceil(64);
            let mut words = vec![0u64; n * stride];
            words.par_chunks_mut(stride).enumerate().try_for_each(|(i, row)| {
                row.copy_from_slice(&sign_words(&prefix(i)?));
                Ok::<_, Error>(())
            })?;
            Store::Binary { words, stride }
        }
    };
    Ok(QuantizedIndex {
        spec,
        ids: emb.ids().to_vec(),
        store,
    })
}

impl QuantizedIndex {
    pub fn spec(&self) -> IndexSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Exact payload size: `len() × bytes_per_vector`.
    pub fn storage_bytes(&self) -> u64 {
        (self.len() * self.spec.bytes_per_vector()) as u64
    }

    /// Header and id table of the serialized form.
    pub fn metadata_bytes(&self) -> u64 {
        io::metadata_bytes(&self.ids, self.spec.dtype())
    }

    pub fn serialized_len(&self) -> u64 {
        self.storage_bytes() + self.metadata_bytes()
    }

    pub fn to_embedding_file(&self) -> EmbeddingFile {
        let d = self.spec.dim;
        let payload = match &self.store {
            Store::F32 { data, .. } => Payload::F32(data.clone()),
            Store::F64 { data, .. } => Payload::F64(data.clone()),
            Store::Int8 { codes, scales, .. } => Payload::I8Scaled {
                codes: codes.clone(),
                scales: scales.clone(),
            },
            Store::Binary { words, stride } => {
                let row_bytes = d.div_ceil(8);
                let mut bytes = Vec::with_capacity(self.len() * row_bytes);
                for row in words.chunks_exact(*stride) {
                    let le: Vec<u8> = row.iter().flat_map(|w| w.to_le_bytes()).collect();
                    bytes.extend_from_slice(&le[..row_bytes]);
                }
                Payload::Bits(bytes)
            }
        };
        EmbeddingFile {
            dim: d,
            ids: self.ids.clone(),
            payload,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_embedding_file(path, &self.to_embedding_file())
    }

    /// Rebuilds an index from its serialized form (dtypes f32, f64, int8 with scales, bits).
    pub fn from_embedding_file(file: EmbeddingFile) -> Result<Self> {
        let d = file.dim;
        if d == 0 {
            return Err(Error::Format("zero dimension".into()));
        }
        let (precision, store) = match file.payload {
            Payload::F32(data) => {
                let norms = data.chunks_exact(d).map(|r| f64_norm(r.iter().map(|&x| x as f64))).collect();
                (Precision::F32, Store::F32 { data, norms })
            }
            Payload::F64(data) => {
                let norms = data.chunks_exact(d).map(|r| f64_norm(r.iter().copied())).collect();
                (Precision::F64, Store::F64 { data, norms })
            }
            Payload::I8Scaled { codes, scales } => {
                let norms = codes.chunks_exact(d).map(|r| f64_norm(r.iter().map(|&x| x as f64))).collect();
                (Precision::Int8, Store::Int8 { codes, scales, norms })
            }
            Payload::Bits(bytes) => {
                let row_bytes = d.div_ceil(8);
                let stride = d.div_ceil(64);
                let mut words = Vec::with_capacity(file.ids.len() * stride);
                for row in bytes.chunks_exact(row_bytes) {
                    let mut padded = row.to_vec();
                    padded.resize(stride * 8, 0);
                    words.extend(padded.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())));
                }
                (Precision::Binary, Store::Binary { words, stride })
            }
            Payload::I8 { .. } => {
                return Err(Error::Format("global-step int8 files are not searchable indexes".into()))
            }
        };
        Ok(Self {
            spec: IndexSpec::new(d, precision),
            ids: file.ids,
            store,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_embedding_file(io::read_embedding_file(path)?)
    }

    /// Truncates, normalizes and encodes a full-dimension query.
    pub fn prepare(&self, query: &[f64]) -> Result<PreparedQuery> {
        let d = self.spec.dim;
        if query.len() < d {
            return Err(Error::DimMismatch {
                expected: d,
                actual: query.len(),
            });
        }
        if query.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("query".into()));
        }
        let q = l2_normalize(&query[..d])?;
        Ok(match self.spec.precision {
            Precision::F32 => {
                let v: Vec<f32> = q.iter().map(|&x| x as f32).collect();
                let n = f64_norm(v.iter().map(|&x| x as f64));
                PreparedQuery::F32(v, n)
            }
            Precision::F64 => {
                let n = f64_norm(q.iter().copied());
                PreparedQuery::F64(q, n)
            }
            Precision::Int8 => {
                let (c, _) = int8_max_abs(&q);
                let n = f64_norm(c.iter().map(|&x| x as f64));
                PreparedQuery::Int8(c, n)
            }
            Precision::Binary => PreparedQuery::Binary(sign_words(&q)),
        })
    }

    /// Cosine between the prepared query and stored row `i`. For Binary
    /// this is `(dim − 2·hamming) / dim`, the cosine of the ±1 codes.
    #[inline]
    fn score(&self, q: &PreparedQuery, i: usize) -> f64 {
        let d = self.spec.dim;
        match (&self.store, q) {
            (Store::F32 { data, norms }, PreparedQuery::F32(v, n)) => {
                dot_f32(&data[i * d..(i + 1) * d], v) as f64 / (n * norms[i])
            }
            (Store::F64 { data, norms }, PreparedQuery::F64(v, n)) => {
                dot_f64(&data[i * d..(i + 1) * d], v) / (n * norms[i])
            }
            (Store::Int8 { codes, norms, .. }, PreparedQuery::Int8(v, n)) => {
                dot_i8(&codes[i * d..(i + 1) * d], v) as f64 / (n * norms[i])
            }
            (Store::Binary { words, stride }, PreparedQuery::Binary(v)) => {
                let h = hamming_words(&words[i * stride..(i + 1) * stride], v) as i64;
                (d as i64 - 2 * h) as f64 / d as f64
            }
            _ => unreachable!("query prepared for another index"),
        }
    }

    /// Exhaustive top-k of a prepared query; ties broken by ascending id.
    pub fn search_prepared(&self, q: &PreparedQuery, top_k: usize) -> Vec<Hit> {
        let mut top = TopK::new(top_k, &self.ids);
        for i in 0..self.len() {
            top.push(self.score(q, i), i);
        }
        top.into_hits()
    }

    pub fn search(&self, query: &[f64], top_k: usize) -> Result<Vec<Hit>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let q = self.prepare(query)?;
        Ok(self.search_prepared(&q, top_k))
    }

    /// Searches every query row in parallel, recording per-query wall-clock
    /// latency around scoring and selection only.
    pub fn search_all(&self, queries: &EmbeddingMatrix, top_k: usize) -> Result<RetrievalRun> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let results: Vec<(RankedList, f64)> = (0..queries.rows())
            .into_par_iter()
            .map(|i| {
                let q = self.prepare(queries.row(i))?;
                let start = Instant::now();
                let hits = self.search_prepared(&q, top_k);
                let ms = start.elapsed().as_secs_f64() * 1e3;
                Ok((
                    RankedList {
                        query: queries.id(i).to_string(),
                        hits,
                    },
                    ms,
                ))
            })
            .collect::<Result<_>>()?;
        let (lists, latency_ms) = results.into_iter().unzip();
        Ok(RetrievalRun {
            queries: lists,
            latency_ms,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> EmbeddingMatrix {
        let ids = (0..rows.len()).map(|i| format!("d{i}")).collect();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        EmbeddingMatrix::new(ids, rows[0].len(), data).unwrap()
    }

    #[test]
    fn bytes_per_vector() {
        assert_eq!(IndexSpec::new(1024, Precision::Binary).bytes_per_vector(), 128);
        assert_eq!(IndexSpec::new(1024, Precision::F32).bytes_per_vector(), 4096);
        assert_eq!(IndexSpec::new(1024, Precision::Int8).bytes_per_vector(), 1028);
        assert_eq!(IndexSpec::new(512, Precision::Int8).bytes_per_vector(), 516);
        assert_eq!(IndexSpec::new(10, Precision::Binary).bytes_per_vector(), 2);
    }

    #[test]
    fn bad_dim() {
        let m = matrix(&[&[1.0, 2.0]]);
        assert!(matches!(build_index(&m, IndexSpec::new(3, Precision::F64)), Err(Error::BadDim { .. })));
        assert!(matches!(build_index(&m, IndexSpec::new(0, Precision::F64)), Err(Error::BadDim { .. })));
    }

    #[test]
    fn empty_index() {
        let m = EmbeddingMatrix::new(vec![], 2, vec![]).unwrap();
        let idx = build_index(&m, IndexSpec::new(2, Precision::F64)).unwrap();
        assert!(matches!(idx.search(&[1.0, 0.0], 1), Err(Error::EmptyIndex)));
    }

    #[test]
    fn self_match_first() {
        let m = matrix(&[&[1.0, 0.2, 0.3], &[0.1, 1.0, -0.4], &[-0.5, 0.5, 0.5]]);
        for p in Precision::ALL {
            let idx = build_index(&m, IndexSpec::new(3, p)).unwrap();
            let hits = idx.search(m.row(1), 3).unwrap();
            assert_eq!(hits[0].doc, "d1", "{p}");
            if p == Precision::F64 {
                assert!((hits[0].score - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn prefix_is_renormalized() {
        let m = matrix(&[&[3.0, 4.0, 100.0]]);
        let idx = build_index(&m, IndexSpec::new(2, Precision::F64)).unwrap();
        let Payload::F64(data) = idx.to_embedding_file().payload else { panic!() };
        assert!((data[0] - 0.6).abs() < 1e-15 && (data[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn ties_by_id() {
        let ids = vec!["c".to_string(), "a".to_string(), "b".to_string()];
        let m = EmbeddingMatrix::new(ids, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let idx = build_index(&m, IndexSpec::new(2, Precision::Binary)).unwrap();
        let hits = idx.search(&[1.0, 1.0], 3).unwrap();
        let order: Vec<&str> = hits.iter().map(|h| h.doc.as_str()).collect();
        assert_eq!(order, ["a", "b", "c"]);
    }

    #[test]
    fn serialized_size_and_roundtrip() {
        let m = matrix(&[&[1.0, -0.2, 0.3, 0.9, -1.0], &[0.1, 1.0, -0.4, 0.0, 0.3]]);
        for p in Precision::ALL {
            let idx = build_index(&m, IndexSpec::new(5, p)).unwrap();
            let mut buf = Vec::new();
            io::write_embedding_file_to(&idx.to_embedding_file(), &mut buf).unwrap();
            assert_eq!(buf.len() as u64, idx.serialized_len(), "{p}");
            let back = QuantizedIndex::from_embedding_file(io::read_embedding_file_from(&mut buf.as_slice()).unwrap()).unwrap();
            let q = [0.3, 0.1, -0.2, 0.5, 0.5];
            assert_eq!(back.search(&q, 2).unwrap(), idx.search(&q, 2).unwrap());
        }
    }

    #[test]
    fn int8_max_abs_codes() {
        let (c, s) = int8_max_abs(&[0.5, -1.0, 0.25]);
        assert_eq!(c, vec![64, -127, 32]);
        assert_eq!(s, (1.0f64 / 127.0) as f32);
    }
}
