//! Prompt templates for the embedding and reranking models, yes/no scoring,
//! and the retrieve-then-rerank pipeline over precomputed logits.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Instance, Part};
use crate::error::{Error, Result};
use crate::index::QuantizedIndex;
use crate::metrics::{Hit, RankedList, RetrievalRun};
use crate::vector::cosine_similarity;

pub const DEFAULT_INSTRUCTION: &str = "Represent the user's input.";
pub const RERANK_SYSTEM: &str = "Judge whether the Document meets the requirements based on the Query and the Instruct provided. Note that the answer can only be \"yes\" or \"no\".";
pub const DEFAULT_TOP_N: usize = 100;

/// Parts concatenated in order; media become `<image:path>` / `<video:path>`.
pub fn render_parts(parts: &[Part]) -> String {
    let mut out = String::new();
    for p in parts {
        match p {
            Part::Text(t) => out.push_str(t),
            Part::Image(path) => {
                out.push_str("<image:");
                out.push_str(path);
                out.push('>');
            }
            Part::Video(path) => {
                out.push_str("<video:");
                out.push_str(path);
                out.push('>');
            }
        }
    }
    out
}

/// The embedding input. It ends with the `<|endoftext|>` pad token, whose
/// hidden state is the embedding, so nothing follows it.
pub fn render_embedding_template(instruction: &str, instance: &Instance) -> Result<String> {
    if instance.parts.is_empty() {
        return Err(Error::EmptyInstance(instance.id.clone()));
    }
    let instruction = if instruction.is_empty() { DEFAULT_INSTRUCTION } else { instruction };
    Ok(format!(
        "<|im_start|>system\n{instruction}\n<|im_end|>\n<|im_start|>user\n{}\n<|im_end|>\n<|im_start|>assistant\n<|endoftext|>",
        render_parts(&instance.parts)
    ))
}

/// The reranker input, ending in an open assistant turn.
pub fn render_rerank_template(instruction: &str, query: &Instance, doc: &Instance) -> String {
    format!(
        "<|im_start|>system\n{RERANK_SYSTEM}\n<|im_end|>\n<|im_start|>user\n<Instruct>: {instruction} \n<Query>: {} \n<Document>: {}\n<|im_end|>\n<|im_start|>assistant\n",
        render_parts(&query.parts),
        render_parts(&doc.parts)
    )
}

/// `sigmoid(logit_yes − logit_no)`.
pub fn rerank_score(logit_yes: f64, logit_no: f64) -> Result<f64> {
    if !logit_yes.is_finite() || !logit_no.is_finite() {
        return Err(Error::NonFinite("rerank logits".into()));
    }
    let d = logit_yes - logit_no;
    Ok(if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankLabel {
    Yes,
    No,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Negative log-probability of `label` under a softmax over the two logits.
pub fn rerank_loss(label: RerankLabel, logit_yes: f64, logit_no: f64) -> f64 {
    match label {
        RerankLabel::Yes => softplus(logit_no - logit_yes),
        RerankLabel::No => softplus(logit_yes - logit_no),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankCandidate {
    pub query: String,
    pub doc: String,
    pub logit_yes: f64,
    pub logit_no: f64,
    pub score: f64,
}

impl RerankCandidate {
    pub fn new(query: &str, doc: &str, logit_yes: f64, logit_no: f64) -> Result<Self> {
        Ok(Self {
            query: query.to_string(),
            doc: doc.to_string(),
            logit_yes,
            logit_no,
            score: rerank_score(logit_yes, logit_no)?,
        })
    }
}

/// Produces the (yes, no) logits for one query–document pair.
pub trait Scorer: Sync {
    fn logits(&self, instruction: &str, query: &Instance, doc: &Instance) -> Result<(f64, f64)>;
}

/// Precomputed logits keyed by (query id, doc id).
#[derive(Debug, Clone, Default)]
pub struct FileScorer {
    logits: HashMap<(String, String), (f64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct LogitRecord {
    query: String,
    doc: String,
    logit_yes: f64,
    logit_no: f64,
}

impl FileScorer {
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut logits = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: LogitRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let key = format!("{}/{}", r.query, r.doc);
            if logits.insert((r.query, r.doc), (r.logit_yes, r.logit_no)).is_some() {
                return Err(Error::DuplicateId(key));
            }
        }
        Ok(Self { logits })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }

    pub fn insert(&mut self, query: &str, doc: &str, logit_yes: f64, logit_no: f64) {
        self.logits.insert((query.to_string(), doc.to_string()), (logit_yes, logit_no));
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Serializes as JSONL sorted by (query, doc).
    pub fn to_jsonl(&self) -> Result<String> {
        let mut keys: Vec<_> = self.logits.iter().collect();
        keys.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for ((query, doc), &(logit_yes, logit_no)) in keys {
            let rec = LogitRecord {
                query: query.clone(),
                doc: doc.clone(),
                logit_yes,
                logit_no,
            };
            out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }
}

impl Scorer for FileScorer {
    fn logits(&self, _instruction: &str, query: &Instance, doc: &Instance) -> Result<(f64, f64)> {
        self.logits
            .get(&(query.id.clone(), doc.id.clone()))
            .copied()
            .ok_or_else(|| Error::DanglingId(format!("{}/{}", query.id, doc.id)))
    }
}

/// `logit_yes = cos(q, d) / τ`, `logit_no = 0`, from the instances' embeddings.
#[derive(Debug, Clone, Copy)]
pub struct MockCosineScorer {
    pub tau: f64,
}

impl Default for MockCosineScorer {
    fn default() -> Self {
        Self { tau: 0.05 }
    }
}

impl Scorer for MockCosineScorer {
    fn logits(&self, _instruction: &str, query: &Instance, doc: &Instance) -> Result<(f64, f64)> {
        let q = query.embedding.as_deref().ok_or_else(|| Error::EmbedderFailure(query.id.clone()))?;
        let d = doc.embedding.as_deref().ok_or_else(|| Error::EmbedderFailure(doc.id.clone()))?;
        Ok((cosine_similarity(q, d)?.value() / self.tau, 0.0))
    }
}

fn lookup(map: &HashMap<String, Instance>, id: &str) -> Instance {
    map.get(id).cloned().unwrap_or_else(|| Instance {
        id: id.to_string(),
        parts: Vec::new(),
        embedding: None,
    })
}

/// Scores the first `top_n` hits of one ranking and re-sorts them by
/// descending score, keeping retrieval order among ties.
pub fn rerank_list(
    list: &RankedList,
    scorer: &dyn Scorer,
    instruction: &str,
    query: &Instance,
    docs: &HashMap<String, Instance>,
    top_n: usize,
) -> Result<Vec<RerankCandidate>> {
    let mut scored = list.hits[..top_n.min(list.hits.len())]
        .iter()
        .map(|h| {
            let (yes, no) = scorer.logits(instruction, query, &lookup(docs, &h.doc))?;
            RerankCandidate::new(&list.query, &h.doc, yes, no)
        })
        .collect::<Result<Vec<_>>>()?;
    // stable sort keeps retrieval rank among equal scores
    scored.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(scored)
}

/// Reranks an existing run. Instances missing from the lookups are passed
/// to the scorer as bare ids.
pub fn rerank_run(
    run: &RetrievalRun,
    scorer: &dyn Scorer,
    instruction: &str,
    queries: &HashMap<String, Instance>,
    docs: &HashMap<String, Instance>,
    top_n: usize,
) -> Result<RetrievalRun> {
    if top_n == 0 {
        return Err(Error::InvalidArgument("top_n must be at least 1".into()));
    }
    let lists = run
        .queries
        .par_iter()
        .map(|list| {
            let q = lookup(queries, &list.query);
            let hits = rerank_list(list, scorer, instruction, &q, docs, top_n)?
                .into_iter()
                .map(|c| Hit { doc: c.doc, score: c.score })
                .collect();
            Ok(RankedList {
                query: list.query.clone(),
                hits,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalRun::new(lists))
}

/// Retrieves `top_n` candidates per query from the index, then reranks them.
/// Queries must carry embeddings.
pub fn rerank_pipeline(
    index: &QuantizedIndex,
    scorer: &dyn Scorer,
    instruction: &str,
    queries: &[Instance],
    docs: &HashMap<String, Instance>,
    top_n: usize,
) -> Result<RetrievalRun> {
    if top_n == 0 {
        return Err(Error::InvalidArgument("top_n must be at least 1".into()));
    }
    let lists = queries
        .par_iter()
        .map(|q| {
            let v = q.embedding.as_deref().ok_or_else(|| Error::EmbedderFailure(q.id.clone()))?;
            let hits = index.search(v, top_n)?;
            Ok(RankedList { query: q.id.clone(), hits })
        })
        .collect::<Result<Vec<_>>>()?;
    let by_id = queries.iter().map(|q| (q.id.clone(), q.clone())).collect();
    rerank_run(&RetrievalRun::new(lists), scorer, instruction, &by_id, docs, top_n)
}
