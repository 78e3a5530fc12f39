//! C ABI over the embrank toolkit.
//!
//! Every fallible function returns an [`EmbrankStatus`]; on failure the
//! message is available from [`embrank_last_error`] on the same thread.
//! Handles are opaque and must be released with their `*_free` function.
//! Arrays are row-major `double` buffers.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use embrank::index::{build_index, IndexSpec, Precision, QuantizedIndex};
use embrank::io::load_embeddings;
use embrank::losses::{retrieval_infonce, ContrastiveBatch, Stage};
use embrank::merge::{merge_checkpoints, ParamSet};
use embrank::rerank::{render_embedding_template, render_rerank_template, rerank_loss, rerank_score, RerankLabel};
use embrank::vector::cosine_similarity;
use embrank::{EmbeddingMatrix, Error, Rows};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbrankStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimMismatch = 3,
    ZeroVector = 4,
    NonFinite = 5,
    Io = 6,
    Format = 7,
    Parse = 8,
    DuplicateId = 9,
    DanglingId = 10,
    EmptyIndex = 11,
    BadDim = 12,
    ManifestMismatch = 13,
    Panic = 14,
    Other = 15,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbrankPrecision {
    F32 = 0,
    F64 = 1,
    Int8 = 2,
    Binary = 3,
}

impl From<EmbrankPrecision> for Precision {
    fn from(p: EmbrankPrecision) -> Self {
        match p {
            EmbrankPrecision::F32 => Precision::F32,
            EmbrankPrecision::F64 => Precision::F64,
            EmbrankPrecision::Int8 => Precision::Int8,
            EmbrankPrecision::Binary => Precision::Binary,
        }
    }
}

/// An embedding matrix with string ids.
pub struct EmbrankMatrix {
    inner: EmbeddingMatrix,
}

/// A built, immutable search index.
pub struct EmbrankIndex {
    inner: QuantizedIndex,
    c_ids: Vec<CString>,
    positions: HashMap<String, usize>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> EmbrankStatus {
    match e {
        Error::ZeroVector => EmbrankStatus::ZeroVector,
        Error::DimMismatch { .. } => EmbrankStatus::DimMismatch,
        Error::NonFinite(_) => EmbrankStatus::NonFinite,
        Error::Parse { .. } => EmbrankStatus::Parse,
        Error::DanglingId(_) => EmbrankStatus::DanglingId,
        Error::DuplicateId(_) => EmbrankStatus::DuplicateId,
        Error::EmptyIndex => EmbrankStatus::EmptyIndex,
        Error::BadDim { .. } | Error::BadDims { .. } => EmbrankStatus::BadDim,
        Error::ManifestMismatch(_) => EmbrankStatus::ManifestMismatch,
        Error::InvalidArgument(_) | Error::EmptyBatch => EmbrankStatus::InvalidArgument,
        Error::Format(_) => EmbrankStatus::Format,
        Error::Io(_) => EmbrankStatus::Io,
        _ => EmbrankStatus::Other,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, recording any error or panic for `embrank_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EmbrankStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            EmbrankStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            EmbrankStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            EmbrankStatus::Panic
        }
    }
}

fn nn<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

unsafe fn doubles<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    Ok(slice::from_raw_parts(nn(p, what)?, len))
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    CStr::from_ptr(nn(p, what)?)
        .to_str()
        .map_err(|_| Failure::Lib(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

unsafe fn write_out<T>(out: *mut T, v: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    out.write(v);
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn embrank_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn embrank_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn embrank_cosine_similarity(a: *const f64, b: *const f64, dim: usize, out: *mut f64) -> EmbrankStatus {
    guard(|| {
        let a = doubles(a, dim, "a")?;
        let b = doubles(b, dim, "b")?;
        write_out(out, cosine_similarity(a, b)?.value(), "out")
    })
}

/// `sigmoid(logit_yes − logit_no)`.
#[no_mangle]
pub unsafe extern "C" fn embrank_rerank_score(logit_yes: f64, logit_no: f64, out: *mut f64) -> EmbrankStatus {
    guard(|| write_out(out, rerank_score(logit_yes, logit_no)?, "out"))
}

/// Two-class cross-entropy at label yes (`label_yes`) or no.
#[no_mangle]
pub unsafe extern "C" fn embrank_rerank_loss(label_yes: bool, logit_yes: f64, logit_no: f64, out: *mut f64) -> EmbrankStatus {
    guard(|| {
        if !logit_yes.is_finite() || !logit_no.is_finite() {
            return Err(Error::NonFinite("rerank logits".into()).into());
        }
        let label = if label_yes { RerankLabel::Yes } else { RerankLabel::No };
        write_out(out, rerank_loss(label, logit_yes, logit_no), "out")
    })
}

/// Contrastive loss of `n` (query, positive) pairs of dimension `dim`.
///
/// `negatives` holds `Σ negative_counts[i]` rows grouped by query; it may be
/// null when every count is zero. `stage2` drops the query–query and
/// document–document terms. Each gradient buffer may be null to skip it and
/// otherwise has the shape of its input.
#[no_mangle]
pub unsafe extern "C" fn embrank_retrieval_infonce(
    queries: *const f64,
    positives: *const f64,
    n: usize,
    dim: usize,
    negatives: *const f64,
    negative_counts: *const usize,
    temperature: f64,
    stage2: bool,
    out_value: *mut f64,
    grad_queries: *mut f64,
    grad_positives: *mut f64,
    grad_negatives: *mut f64,
) -> EmbrankStatus {
    guard(|| {
        let q = Rows::new(n, dim, doubles(queries, n * dim, "queries")?.to_vec())?;
        let p = Rows::new(n, dim, doubles(positives, n * dim, "positives")?.to_vec())?;
        let counts: &[usize] = if n == 0 { &[] } else { slice::from_raw_parts(nn(negative_counts, "negative_counts")?, n) };
        let total: usize = counts.iter().sum();
        let all_negs = doubles(negatives, total * dim, "negatives")?;
        let mut negs = Vec::with_capacity(n);
        let mut off = 0;
        for &k in counts {
            negs.push(Rows::new(k, dim, all_negs[off * dim..(off + k) * dim].to_vec())?);
            off += k;
        }
        let stage = if stage2 { Stage::Stage2 } else { Stage::Stage1 };
        let batch = ContrastiveBatch::new(q, p, negs, temperature, stage)?;
        let r = retrieval_infonce(&batch)?;
        write_out(out_value, r.value, "out_value")?;
        let copy = |dst: *mut f64, name: &str, len: usize| {
            if dst.is_null() || len == 0 {
                return;
            }
            let out = slice::from_raw_parts_mut(dst, len);
            match r.grad(name) {
                Some(g) => out.copy_from_slice(g.data()),
                None => out.fill(0.0),
            }
        };
        copy(grad_queries, "queries", n * dim);
        copy(grad_positives, "positives", n * dim);
        if !grad_negatives.is_null() {
            let mut off = 0;
            for (i, &k) in counts.iter().enumerate() {
                copy(grad_negatives.add(off * dim), &format!("negatives/{i}"), k * dim);
                off += k;
            }
        }
        Ok(())
    })
}

/// Weighted merge of `n_inputs` arrays of `len` doubles into `out`.
#[no_mangle]
pub unsafe extern "C" fn embrank_merge(
    inputs: *const *const f64,
    n_inputs: usize,
    len: usize,
    weights: *const f64,
    out: *mut f64,
) -> EmbrankStatus {
    guard(|| {
        let ptrs = slice::from_raw_parts(nn(inputs, "inputs")?, n_inputs);
        let weights = doubles(weights, n_inputs, "weights")?;
        let sets = ptrs
            .iter()
            .map(|&p| {
                let data = doubles(p, len, "input")?.to_vec();
                Ok(ParamSet::from_arrays([("w".to_string(), Rows::new(1, len, data)?)])?)
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        let merged = merge_checkpoints(&sets, weights)?;
        if len > 0 {
            slice::from_raw_parts_mut(nn(out, "out")? as *mut f64, len).copy_from_slice(merged.get("w").unwrap().data());
        }
        Ok(())
    })
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Embedding-model input for a text instance. An empty instruction selects
/// the default. Returns null on error; free with `embrank_string_free`.
#[no_mangle]
pub unsafe extern "C" fn embrank_render_embedding_template(instruction: *const c_char, text_part: *const c_char) -> *mut c_char {
    let mut out = ptr::null_mut();
    guard(|| {
        let inst = embrank::dataset::Instance::text("input", text(text_part, "text")?);
        out = into_c_string(render_embedding_template(text(instruction, "instruction")?, &inst)?);
        Ok(())
    });
    out
}

/// Reranker input for text query and document. Returns null on error;
/// free with `embrank_string_free`.
#[no_mangle]
pub unsafe extern "C" fn embrank_render_rerank_template(
    instruction: *const c_char,
    query: *const c_char,
    document: *const c_char,
) -> *mut c_char {
    let mut out = ptr::null_mut();
    guard(|| {
        let q = embrank::dataset::Instance::text("query", text(query, "query")?);
        let d = embrank::dataset::Instance::text("document", text(document, "document")?);
        out = into_c_string(render_rerank_template(text(instruction, "instruction")?, &q, &d));
        Ok(())
    });
    out
}

#[no_mangle]
pub unsafe extern "C" fn embrank_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a matrix from `rows` ids and `rows × dim` values.
#[no_mangle]
pub unsafe extern "C" fn embrank_matrix_new(
    ids: *const *const c_char,
    data: *const f64,
    rows: usize,
    dim: usize,
    out: *mut *mut EmbrankMatrix,
) -> EmbrankStatus {
    guard(|| {
        let id_ptrs: &[*const c_char] = if rows == 0 { &[] } else { slice::from_raw_parts(nn(ids, "ids")?, rows) };
        let ids = id_ptrs
            .iter()
            .map(|&p| text(p, "id").map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let m = EmbeddingMatrix::new(ids, dim, doubles(data, rows * dim, "data")?.to_vec())?;
        write_out(out, Box::into_raw(Box::new(EmbrankMatrix { inner: m })), "out")
    })
}

/// Loads an embedding file (any float or quantized dtype, dequantized).
#[no_mangle]
pub unsafe extern "C" fn embrank_matrix_load(path: *const c_char, out: *mut *mut EmbrankMatrix) -> EmbrankStatus {
    guard(|| {
        let m = load_embeddings(text(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(EmbrankMatrix { inner: m })), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn embrank_matrix_rows(m: *const EmbrankMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.inner.rows())
}

#[no_mangle]
pub unsafe extern "C" fn embrank_matrix_dim(m: *const EmbrankMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.inner.dim())
}

/// Row-major values, valid for the lifetime of the handle.
#[no_mangle]
pub unsafe extern "C" fn embrank_matrix_data(m: *const EmbrankMatrix) -> *const f64 {
    m.as_ref().map_or(ptr::null(), |m| m.inner.data().as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn embrank_matrix_free(m: *mut EmbrankMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

fn wrap_index(inner: QuantizedIndex) -> *mut EmbrankIndex {
    let c_ids = inner.ids().iter().map(|s| CString::new(s.replace('\0', " ")).unwrap_or_default()).collect();
    let positions = inner.ids().iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    Box::into_raw(Box::new(EmbrankIndex { inner, c_ids, positions }))
}

/// Builds an index over the first `dim` components of every row.
#[no_mangle]
pub unsafe extern "C" fn embrank_index_build(
    m: *const EmbrankMatrix,
    dim: usize,
    precision: EmbrankPrecision,
    out: *mut *mut EmbrankIndex,
) -> EmbrankStatus {
    guard(|| {
        let m = &*nn(m, "matrix")?;
        let idx = build_index(&m.inner, IndexSpec::new(dim, precision.into()))?;
        write_out(out, wrap_index(idx), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn embrank_index_load(path: *const c_char, out: *mut *mut EmbrankIndex) -> EmbrankStatus {
    guard(|| {
        let idx = QuantizedIndex::load(text(path, "path")?)?;
        write_out(out, wrap_index(idx), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn embrank_index_save(idx: *const EmbrankIndex, path: *const c_char) -> EmbrankStatus {
    guard(|| {
        let idx = &*nn(idx, "index")?;
        Ok(idx.inner.save(text(path, "path")?)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn embrank_index_len(idx: *const EmbrankIndex) -> usize {
    idx.as_ref().map_or(0, |i| i.inner.len())
}

/// Payload bytes: vectors × bytes per vector.
#[no_mangle]
pub unsafe extern "C" fn embrank_index_storage_bytes(idx: *const EmbrankIndex) -> u64 {
    idx.as_ref().map_or(0, |i| i.inner.storage_bytes())
}

/// Id of stored vector `pos`, valid for the lifetime of the handle; null if out of range.
#[no_mangle]
pub unsafe extern "C" fn embrank_index_id(idx: *const EmbrankIndex, pos: usize) -> *const c_char {
    idx.as_ref()
        .and_then(|i| i.c_ids.get(pos))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Exact top-`top_k` search. `query_dim` must be at least the index
/// dimension. Writes up to `top_k` positions and scores and the hit count.
#[no_mangle]
pub unsafe extern "C" fn embrank_index_search(
    idx: *const EmbrankIndex,
    query: *const f64,
    query_dim: usize,
    top_k: usize,
    out_positions: *mut usize,
    out_scores: *mut f64,
    out_count: *mut usize,
) -> EmbrankStatus {
    guard(|| {
        let idx = &*nn(idx, "index")?;
        let q = doubles(query, query_dim, "query")?;
        let hits = idx.inner.search(q, top_k)?;
        if !hits.is_empty() {
            let pos = slice::from_raw_parts_mut(nn(out_positions, "out_positions")? as *mut usize, hits.len());
            let sc = slice::from_raw_parts_mut(nn(out_scores, "out_scores")? as *mut f64, hits.len());
            for (i, h) in hits.iter().enumerate() {
                pos[i] = idx.positions[&h.doc];
                sc[i] = h.score;
            }
        }
        write_out(out_count, hits.len(), "out_count")
    })
}

#[no_mangle]
pub unsafe extern "C" fn embrank_index_free(idx: *mut EmbrankIndex) {
    if !idx.is_null() {
        drop(Box::from_raw(idx));
    }
}
