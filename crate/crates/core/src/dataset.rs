//! The instruction / queries / corpus / relevance-labels dataset model and
//! its JSONL representation.
//!
//! File layout, one JSON object per line:
//!
//! ```text
//! {"instruction": "..."}
//! {"kind":"query","id":"q_01","parts":[{"text":"..."}],"embedding":[...]}
//! {"kind":"doc","id":"d_01","parts":[{"image":"pages/01.png"}]}
//! {"kind":"rel","query":"q_01","pos":["d_01"],"neg":["d_02"],"scores":{"d_01":4.5}}
//! ```
//!
//! Media parts are references only; nothing here opens them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// One modality part of an instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Text(String),
    Image(String),
    Video(String),
}

/// A query or corpus item: an ordered list of parts plus an optional precomputed embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub parts: Vec<Part>,
    pub embedding: Option<Vec<f64>>,
}

impl Instance {
    pub fn text(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            parts: vec![Part::Text(text.into())],
            embedding: None,
        }
    }

    pub fn with_embedding(mut self, embedding: Vec<f64>) -> Self {
        self.embedding = Some(embedding);
        self
    }
}

/// Labels for a single query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryLabels {
    pub query: String,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    /// Graded relevance per document (STS-style supervision).
    pub scores: BTreeMap<String, f64>,
}

/// Relevance labels for every query of a dataset, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelevanceLabels {
    pub entries: Vec<QueryLabels>,
}

impl RelevanceLabels {
    pub fn get(&self, query: &str) -> Option<&QueryLabels> {
        self.entries.iter().find(|e| e.query == query)
    }

    /// Map from query id to labels, for repeated lookups.
    pub fn by_query(&self) -> HashMap<&str, &QueryLabels> {
        self.entries.iter().map(|e| (e.query.as_str(), e)).collect()
    }

    pub fn positives_of(&self, query: &str) -> &[String] {
        self.get(query).map(|e| e.positives.as_slice()).unwrap_or(&[])
    }
}

/// The `(instruction, queries, corpus, relevance)` quadruple.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetQuadruple {
    pub instruction: String,
    pub queries: Vec<Instance>,
    pub corpus: Vec<Instance>,
    pub relevance: RelevanceLabels,
}

impl DatasetQuadruple {
    /// Checks the structural invariants: unique ids and no dangling references.
    pub fn check_structure(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for inst in self.queries.iter().chain(&self.corpus) {
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::DuplicateId(inst.id.clone()));
            }
        }
        let queries: HashSet<&str> = self.queries.iter().map(|q| q.id.as_str()).collect();
        let docs: HashSet<&str> = self.corpus.iter().map(|d| d.id.as_str()).collect();
        let mut labelled = HashSet::new();
        for rel in &self.relevance.entries {
            if !queries.contains(rel.query.as_str()) {
                return Err(Error::DanglingId(rel.query.clone()));
            }
            if !labelled.insert(rel.query.as_str()) {
                return Err(Error::DuplicateId(rel.query.clone()));
            }
            let referenced = rel
                .positives
                .iter()
                .chain(&rel.negatives)
                .chain(rel.scores.keys());
            for id in referenced {
                if !docs.contains(id.as_str()) {
                    return Err(Error::DanglingId(id.clone()));
                }
            }
        }
        Ok(())
    }

    /// Embedding dimension declared by the first instance that carries one.
    pub fn embedding_dim(&self) -> Option<usize> {
        self.queries
            .iter()
            .chain(&self.corpus)
            .find_map(|i| i.embedding.as_ref().map(Vec::len))
    }

    pub fn query(&self, id: &str) -> Option<&Instance> {
        self.queries.iter().find(|q| q.id == id)
    }

    pub fn doc(&self, id: &str) -> Option<&Instance> {
        self.corpus.iter().find(|d| d.id == id)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    instruction: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Query(InstanceRecord),
    Doc(InstanceRecord),
    Rel(RelRecord),
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    id: String,
    parts: Vec<Part>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct RelRecord {
    pub(crate) query: String,
    #[serde(default)]
    pub(crate) pos: Vec<String>,
    #[serde(default)]
    pub(crate) neg: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub(crate) scores: Option<BTreeMap<String, f64>>,
}

impl From<RelRecord> for QueryLabels {
    fn from(r: RelRecord) -> Self {
        QueryLabels {
            query: r.query,
            positives: r.pos,
            negatives: r.neg,
            scores: r.scores.unwrap_or_default(),
        }
    }
}

impl From<&QueryLabels> for RelRecord {
    fn from(l: &QueryLabels) -> Self {
        RelRecord {
            query: l.query.clone(),
            pos: l.positives.clone(),
            neg: l.negatives.clone(),
            scores: (!l.scores.is_empty()).then(|| l.scores.clone()),
        }
    }
}

impl From<InstanceRecord> for Instance {
    fn from(r: InstanceRecord) -> Self {
        Instance {
            id: r.id,
            parts: r.parts,
            embedding: r.embedding,
        }
    }
}

fn to_record(i: &Instance) -> InstanceRecord {
    InstanceRecord {
        id: i.id.clone(),
        parts: i.parts.clone(),
        embedding: i.embedding.clone(),
    }
}

/// Parses a dataset from any line reader. Line numbers in errors are 1-based.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<DatasetQuadruple> {
    let mut instruction = None;
    let mut queries = Vec::new();
    let mut corpus = Vec::new();
    let mut entries = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            line: lineno,
            message: e.to_string(),
        };
        if instruction.is_none() {
            let h: Header = serde_json::from_str(&line).map_err(parse_err)?;
            instruction = Some(h.instruction);
            continue;
        }
        match serde_json::from_str::<Record>(&line).map_err(parse_err)? {
            Record::Query(r) => queries.push(r.into()),
            Record::Doc(r) => corpus.push(r.into()),
            Record::Rel(r) => entries.push(r.into()),
        }
    }
    let instruction = instruction.ok_or(Error::Parse {
        line: 1,
        message: "missing instruction header".into(),
    })?;
    let ds = DatasetQuadruple {
        instruction,
        queries,
        corpus,
        relevance: RelevanceLabels { entries },
    };
    ds.check_structure()?;
    Ok(ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetQuadruple> {
    read_dataset(BufReader::new(File::open(path)?))
}

fn json_line<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_dataset<W: Write>(ds: &DatasetQuadruple, mut w: W) -> Result<()> {
    let header = Header {
        instruction: ds.instruction.clone(),
    };
    writeln!(w, "{}", json_line(&header)?)?;
    for q in &ds.queries {
        writeln!(w, "{}", json_line(&Record::Query(to_record(q)))?)?;
    }
    for d in &ds.corpus {
        writeln!(w, "{}", json_line(&Record::Doc(to_record(d)))?)?;
    }
    for rel in &ds.relevance.entries {
        writeln!(w, "{}", json_line(&Record::Rel(rel.into()))?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(ds: &DatasetQuadruple, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), |f| write_dataset(ds, BufWriter::new(f)))
}

/// Reads a qrels file: `rel` lines only, in the dataset's JSONL syntax.
pub fn read_qrels<R: BufRead>(reader: R) -> Result<RelevanceLabels> {
    let mut entries: Vec<QueryLabels> = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: idx + 1, message };
        match serde_json::from_str::<Record>(&line).map_err(|e| parse_err(e.to_string()))? {
            Record::Rel(r) => {
                if !seen.insert(r.query.clone()) {
                    return Err(Error::DuplicateId(r.query));
                }
                entries.push(r.into());
            }
            _ => return Err(parse_err("expected a `rel` record".into())),
        }
    }
    Ok(RelevanceLabels { entries })
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<RelevanceLabels> {
    read_qrels(BufReader::new(File::open(path)?))
}

pub fn write_qrels<W: Write>(labels: &RelevanceLabels, mut w: W) -> Result<()> {
    for rel in &labels.entries {
        writeln!(w, "{}", json_line(&Record::Rel(rel.into()))?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_qrels(labels: &RelevanceLabels, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), |f| write_qrels(labels, BufWriter::new(f)))
}

/// Kind of invariant a dataset breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    EmptyInstance,
    EmptyPositives,
    OverlappingLabels,
    EmbeddingDim,
    NonFiniteEmbedding,
    NonFiniteScore,
    DanglingId,
    DuplicateId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub ids: Vec<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} [{}]: {}", self.kind, self.ids.join(", "), self.message)
    }
}

/// Every invariant violation found in a dataset; empty iff training-ready.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    fn push(&mut self, kind: ViolationKind, ids: Vec<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            kind,
            ids,
            message: message.into(),
        });
    }
}

pub fn validate_dataset(ds: &DatasetQuadruple) -> ValidationReport {
    let mut report = ValidationReport::default();
    let dim = ds.embedding_dim();

    let mut seen = HashSet::new();
    for inst in ds.queries.iter().chain(&ds.corpus) {
        if !seen.insert(inst.id.as_str()) {
            report.push(
                ViolationKind::DuplicateId,
                vec![inst.id.clone()],
                "id used more than once",
            );
        }
        if inst.parts.is_empty() {
            report.push(
                ViolationKind::EmptyInstance,
                vec![inst.id.clone()],
                "instance has no parts",
            );
        }
        if let (Some(e), Some(d)) = (&inst.embedding, dim) {
            if e.len() != d {
                report.push(
                    ViolationKind::EmbeddingDim,
                    vec![inst.id.clone()],
                    format!("embedding has {} components, dataset dimension is {d}", e.len()),
                );
            } else if e.iter().any(|x| !x.is_finite()) {
                report.push(
                    ViolationKind::NonFiniteEmbedding,
                    vec![inst.id.clone()],
                    "embedding has non-finite components",
                );
            }
        }
    }

    let docs: HashSet<&str> = ds.corpus.iter().map(|d| d.id.as_str()).collect();
    let labels = ds.relevance.by_query();
    for rel in &ds.relevance.entries {
        if ds.query(&rel.query).is_none() {
            report.push(
                ViolationKind::DanglingId,
                vec![rel.query.clone()],
                "relevance entry for unknown query",
            );
        }
        for id in rel.positives.iter().chain(&rel.negatives).chain(rel.scores.keys()) {
            if !docs.contains(id.as_str()) {
                report.push(
                    ViolationKind::DanglingId,
                    vec![rel.query.clone(), id.clone()],
                    "label references unknown document",
                );
            }
        }
        let pos: HashSet<&str> = rel.positives.iter().map(String::as_str).collect();
        let overlap: Vec<String> = rel
            .negatives
            .iter()
            .filter(|n| pos.contains(n.as_str()))
            .cloned()
            .collect();
        if !overlap.is_empty() {
            let mut ids = vec![rel.query.clone()];
            ids.extend(overlap);
            report.push(
                ViolationKind::OverlappingLabels,
                ids,
                "document labelled both positive and negative",
            );
        }
        for (id, s) in &rel.scores {
            if !s.is_finite() {
                report.push(
                    ViolationKind::NonFiniteScore,
                    vec![rel.query.clone(), id.clone()],
                    "graded score is not finite",
                );
            }
        }
    }
    for q in &ds.queries {
        let has_pos = labels
            .get(q.id.as_str())
            .is_some_and(|l| !l.positives.is_empty());
        if !has_pos {
            report.push(
                ViolationKind::EmptyPositives,
                vec![q.id.clone()],
                "query has no positive documents",
            );
        }
    }
    report
}
