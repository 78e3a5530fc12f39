//! Binary embedding files and atomic output.
//!
//! Layout (little-endian):
//!
//! ```text
//! "QVLE" | u32 version=1 | u32 dim | u8 dtype | u64 count
//! count × (u32 byte length | UTF-8 id)
//! count × row
//! [f64 Δ]                      only for dtype 2
//! ```
//!
//! Row sizes by dtype: 0 = f32 (`4·dim`), 1 = f64 (`8·dim`), 2 = i8 codes
//! sharing one step `Δ` (`dim`), 3 = packed sign bits, LSB first
//! (`⌈dim/8⌉`), 4 = i8 codes followed by a per-row f32 scale (`dim + 4`).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{EmbeddingMatrix, Rows};

pub const MAGIC: &[u8; 4] = b"QVLE";
pub const VERSION: u32 = 1;
/// Fixed header size: magic, version, dim, dtype, count.
pub const HEADER_BYTES: u64 = 4 + 4 + 4 + 1 + 8;

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut File) -> Result<()>,
{
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        body(&mut f)?;
        f.sync_all()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    I8 = 2,
    Bit = 3,
    I8Scaled = 4,
}

impl Dtype {
    fn from_u8(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Dtype::F32,
            1 => Dtype::F64,
            2 => Dtype::I8,
            3 => Dtype::Bit,
            4 => Dtype::I8Scaled,
            _ => return Err(Error::Format(format!("unknown dtype {b}"))),
        })
    }

    pub fn row_bytes(self, dim: usize) -> usize {
        match self {
            Dtype::F32 => 4 * dim,
            Dtype::F64 => 8 * dim,
            Dtype::I8 => dim,
            Dtype::Bit => dim.div_ceil(8),
            Dtype::I8Scaled => dim + 4,
        }
    }
}

/// Row payload of an embedding file.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I8 { codes: Vec<i8>, delta: f64 },
    Bits(Vec<u8>),
    I8Scaled { codes: Vec<i8>, scales: Vec<f32> },
}

impl Payload {
    pub fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::F64(_) => Dtype::F64,
            Payload::I8 { .. } => Dtype::I8,
            Payload::Bits(_) => Dtype::Bit,
            Payload::I8Scaled { .. } => Dtype::I8Scaled,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub ids: Vec<String>,
    pub payload: Payload,
}

impl EmbeddingFile {
    pub fn count(&self) -> usize {
        self.ids.len()
    }

    /// Bytes taken by everything except row data.
    pub fn metadata_bytes(&self) -> u64 {
        metadata_bytes(&self.ids, self.payload.dtype())
    }

    pub fn payload_bytes(&self) -> u64 {
        (self.count() * self.payload.dtype().row_bytes(self.dim)) as u64
    }

    fn check(&self) -> Result<()> {
        let n = self.count();
        let d = self.dim;
        let ok = match &self.payload {
            Payload::F32(v) => v.len() == n * d,
            Payload::F64(v) => v.len() == n * d,
            Payload::I8 { codes, .. } => codes.len() == n * d,
            Payload::Bits(b) => b.len() == n * d.div_ceil(8),
            Payload::I8Scaled { codes, scales } => codes.len() == n * d && scales.len() == n,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Format("payload length does not match count × dim".into()))
        }
    }

    /// Dequantizes into a float64 matrix (bits become ±1).
    pub fn to_matrix(&self) -> Result<EmbeddingMatrix> {
        let d = self.dim;
        let data: Vec<f64> = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Payload::F64(v) => v.clone(),
            Payload::I8 { codes, delta } => codes.iter().map(|&c| f64::from(c) * delta).collect(),
            Payload::Bits(bytes) => {
                let stride = d.div_ceil(8);
                let mut out = Vec::with_capacity(self.count() * d);
                for row in bytes.chunks_exact(stride.max(1)).take(self.count()) {
                    out.extend((0..d).map(|j| if row[j / 8] >> (j % 8) & 1 == 1 { 1.0 } else { -1.0 }));
                }
                out
            }
            Payload::I8Scaled { codes, scales } => codes
                .chunks_exact(d.max(1))
                .zip(scales)
                .flat_map(|(row, &s)| row.iter().map(move |&c| f64::from(c) * f64::from(s)))
                .collect(),
        };
        EmbeddingMatrix::new(self.ids.clone(), d, data)
    }
}

pub fn metadata_bytes(ids: &[String], dtype: Dtype) -> u64 {
    let ids: u64 = ids.iter().map(|s| 4 + s.len() as u64).sum();
    let trailer = if dtype == Dtype::I8 { 8 } else { 0 };
    HEADER_BYTES + ids + trailer
}

pub fn write_embedding_file_to<W: Write>(file: &EmbeddingFile, w: &mut W) -> Result<()> {
    file.check()?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(file.dim).map_err(|_| Error::Format("dim too large".into()))?.to_le_bytes())?;
    w.write_all(&[file.payload.dtype() as u8])?;
    w.write_all(&(file.count() as u64).to_le_bytes())?;
    for id in &file.ids {
        let len = u32::try_from(id.len()).map_err(|_| Error::Format("id too long".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
    }
    match &file.payload {
        Payload::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Payload::F64(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Payload::I8 { codes, delta } => {
            w.write_all(&codes.iter().map(|&c| c as u8).collect::<Vec<_>>())?;
            w.write_all(&delta.to_le_bytes())?;
        }
        Payload::Bits(b) => w.write_all(b)?,
        Payload::I8Scaled { codes, scales } => {
            let d = file.dim;
            for (i, s) in scales.iter().enumerate() {
                let row: Vec<u8> = codes[i * d..(i + 1) * d].iter().map(|&c| c as u8).collect();
                w.write_all(&row)?;
                w.write_all(&s.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn write_embedding_file(path: impl AsRef<Path>, file: &EmbeddingFile) -> Result<()> {
    write_atomic(path.as_ref(), |f| {
        let mut w = BufWriter::new(f);
        write_embedding_file_to(file, &mut w)?;
        w.flush()?;
        Ok(())
    })
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn read_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    Ok(buf)
}

pub fn read_embedding_file_from<R: Read>(r: &mut R) -> Result<EmbeddingFile> {
    if &read_exact::<4, _>(r)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(read_exact(r)?) as usize;
    let dtype = Dtype::from_u8(read_exact::<1, _>(r)?[0])?;
    let count = usize::try_from(u64::from_le_bytes(read_exact(r)?))
        .map_err(|_| Error::Format("count too large".into()))?;
    let mut ids = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(r)?) as usize;
        let bytes = read_vec(r, len)?;
        ids.push(String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?);
    }
    let body = read_vec(r, count * dtype.row_bytes(dim))?;
    let payload = match dtype {
        Dtype::F32 => Payload::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F64 => Payload::F64(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::I8 => {
            let delta = f64::from_le_bytes(read_exact(r)?);
            Payload::I8 {
                codes: body.into_iter().map(|b| b as i8).collect(),
                delta,
            }
        }
        Dtype::Bit => Payload::Bits(body),
        Dtype::I8Scaled => {
            let mut codes = Vec::with_capacity(count * dim);
            let mut scales = Vec::with_capacity(count);
            for row in body.chunks_exact(dim + 4) {
                codes.extend(row[..dim].iter().map(|&b| b as i8));
                scales.push(f32::from_le_bytes(row[dim..].try_into().unwrap()));
            }
            Payload::I8Scaled { codes, scales }
        }
    };
    Ok(EmbeddingFile { dim, ids, payload })
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    let mut r = BufReader::new(File::open(path)?);
    read_embedding_file_from(&mut r)
}

/// Float element type used when saving full-precision embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloatDtype {
    F32,
    F64,
}

pub fn embedding_file(m: &EmbeddingMatrix, dtype: FloatDtype) -> EmbeddingFile {
    let payload = match dtype {
        FloatDtype::F32 => Payload::F32(m.data().iter().map(|&x| x as f32).collect()),
        FloatDtype::F64 => Payload::F64(m.data().to_vec()),
    };
    EmbeddingFile {
        dim: m.dim(),
        ids: m.ids().to_vec(),
        payload,
    }
}

pub fn save_embeddings(path: impl AsRef<Path>, m: &EmbeddingMatrix, dtype: FloatDtype) -> Result<()> {
    write_embedding_file(path, &embedding_file(m, dtype))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    read_embedding_file(path)?.to_matrix()
}

/// Magic of a parameter-set file: a section count followed by
/// `u32 name length | UTF-8 name | f64 embedding block` per named array.
pub const PARAM_MAGIC: &[u8; 4] = b"QVLP";

/// Serializes named 2-D arrays, rows tagged by their index.
pub fn write_sections<W: Write>(w: &mut W, sections: &[(&str, &Rows)]) -> Result<()> {
    w.write_all(PARAM_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(sections.len() as u32).to_le_bytes())?;
    for (name, rows) in sections {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let block = EmbeddingFile {
            dim: rows.dim(),
            ids: (0..rows.rows()).map(|i| i.to_string()).collect(),
            payload: Payload::F64(rows.data().to_vec()),
        };
        write_embedding_file_to(&block, w)?;
    }
    Ok(())
}

pub fn read_sections<R: Read>(r: &mut R) -> Result<Vec<(String, Rows)>> {
    if &read_exact::<4, _>(r)? != PARAM_MAGIC {
        return Err(Error::Format("bad parameter-set magic".into()));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u32::from_le_bytes(read_exact(r)?) as usize;
        let name = String::from_utf8(read_vec(r, len)?).map_err(|e| Error::Format(e.to_string()))?;
        let block = read_embedding_file_from(r)?;
        let data = match block.payload {
            Payload::F64(v) => v,
            _ => return Err(Error::Format(format!("section `{name}` is not f64"))),
        };
        out.push((name, Rows::new(block.ids.len(), block.dim, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingMatrix {
        EmbeddingMatrix::new(
            vec!["a".into(), "bé".into(), "c".into()],
            3,
            vec![0.5, -1.0, 2.0, 0.0, 1.0, 0.25, -3.0, 0.125, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn f64_round_trip_and_size() {
        let m = sample();
        let f = embedding_file(&m, FloatDtype::F64);
        let mut buf = Vec::new();
        write_embedding_file_to(&f, &mut buf).unwrap();
        assert_eq!(buf.len() as u64, f.metadata_bytes() + f.payload_bytes());
        let back = read_embedding_file_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.to_matrix().unwrap(), m);
    }

    #[test]
    fn every_dtype_matches_declared_size() {
        let ids: Vec<String> = vec!["x".into(), "yy".into()];
        let payloads = vec![
            Payload::F32(vec![1.0; 20]),
            Payload::F64(vec![1.0; 20]),
            Payload::I8 { codes: vec![3; 20], delta: 0.5 },
            Payload::Bits(vec![0xAB; 4]),
            Payload::I8Scaled { codes: vec![-7; 20], scales: vec![0.1, 0.2] },
        ];
        for payload in payloads {
            let f = EmbeddingFile { dim: 10, ids: ids.clone(), payload };
            let mut buf = Vec::new();
            write_embedding_file_to(&f, &mut buf).unwrap();
            assert_eq!(buf.len() as u64, f.metadata_bytes() + f.payload_bytes());
            assert_eq!(read_embedding_file_from(&mut buf.as_slice()).unwrap(), f);
        }
    }

    #[test]
    fn bits_dequantize_to_signs() {
        let f = EmbeddingFile {
            dim: 4,
            ids: vec!["a".into()],
            payload: Payload::Bits(vec![0b0101]),
        };
        assert_eq!(f.to_matrix().unwrap().row(0), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00".to_vec();
        assert!(matches!(read_embedding_file_from(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        save_embeddings(&p, &sample(), FloatDtype::F32).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
        let m = load_embeddings(&p).unwrap();
        assert_eq!(m.row(2), &[-3.0, 0.125, 1.0]);
    }

    #[test]
    fn sections_round_trip() {
        let a = Rows::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Rows::new(1, 3, vec![-1.0, 0.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_sections(&mut buf, &[("proj", &a), ("bias", &b)]).unwrap();
        let back = read_sections(&mut buf.as_slice()).unwrap();
        assert_eq!(back, vec![("proj".to_string(), a), ("bias".to_string(), b)]);
    }
}
