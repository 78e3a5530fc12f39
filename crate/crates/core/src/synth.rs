//! Seeded clustered embedding corpora with known relevance, for benchmarking
//! search at scales where real model embeddings are unavailable.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dataset::{save_qrels, QueryLabels, RelevanceLabels};
use crate::error::{Error, Result};
use crate::io::{save_embeddings, FloatDtype};
use crate::matrix::EmbeddingMatrix;
use crate::vector::{cosine_unchecked, l2_normalize};

const CENTER_ATTEMPTS: usize = 10_000;
const DOC_STREAM: u64 = 1 << 40;
const QUERY_STREAM: u64 = 2 << 40;
const ASSIGN_STREAM: u64 = 3 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub n_queries: usize,
    pub dim: usize,
    pub clusters: usize,
    /// Scale of the isotropic perturbation turning a document into its query.
    pub noise: f64,
    pub seed: u64,
    /// Scale of the perturbation placing a document around its center.
    pub spread: f64,
    /// Upper bound on the cosine between any two cluster centers.
    pub max_center_cosine: f64,
}

impl SynthConfig {
    pub fn new(n_docs: usize, n_queries: usize, dim: usize, clusters: usize, noise: f64, seed: u64) -> Self {
        Self {
            n_docs,
            n_queries,
            dim,
            clusters,
            noise,
            seed,
            spread: 0.3,
            max_center_cosine: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub docs: EmbeddingMatrix,
    pub queries: EmbeddingMatrix,
    /// Each query's single positive is the document it was derived from.
    pub labels: RelevanceLabels,
    pub centers: Vec<Vec<f64>>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// `normalize(base + scale · g / √dim)` with `g` standard normal.
fn perturb(base: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let k = scale / (base.len() as f64).sqrt();
    let v: Vec<f64> = base.iter().map(|&b| b + k * rng.sample::<f64, _>(StandardNormal)).collect();
    l2_normalize(&v)
}

fn padded_ids(prefix: &str, n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len();
    (0..n).map(|i| format!("{prefix}{i:0width$}")).collect()
}

fn place_centers(cfg: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng_for(cfg.seed, 0);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.clusters);
    let mut attempts = 0;
    while centers.len() < cfg.clusters {
        attempts += 1;
        if attempts > CENTER_ATTEMPTS * cfg.clusters {
            return Err(Error::InfeasibleSeparation {
                clusters: cfg.clusters,
                dim: cfg.dim,
                max_cosine: cfg.max_center_cosine,
            });
        }
        let Ok(c) = l2_normalize(&gaussian(&mut rng, cfg.dim)) else { continue };
        if centers.iter().all(|o| cosine_unchecked(o, &c) <= cfg.max_center_cosine) {
            centers.push(c);
        }
    }
    Ok(centers)
}

/// Documents are assigned to clusters round-robin; each query copies a
/// distinct seeded-random document and adds noise.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.dim == 0 || cfg.clusters == 0 || cfg.n_docs == 0 {
        return Err(Error::InvalidArgument("dim, clusters and n_docs must be positive".into()));
    }
    if cfg.clusters > cfg.n_docs {
        return Err(Error::InvalidArgument(format!(
            "{} clusters for {} documents",
            cfg.clusters, cfg.n_docs
        )));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) || !(cfg.spread >= 0.0 && cfg.spread.is_finite()) {
        return Err(Error::InvalidArgument("noise and spread must be finite and non-negative".into()));
    }
    let centers = place_centers(cfg)?;

    let d = cfg.dim;
    let mut docs = vec![0.0; cfg.n_docs * d];
    docs.par_chunks_mut(d).enumerate().try_for_each(|(i, row)| {
        let v = perturb(&centers[i % cfg.clusters], cfg.spread, &mut rng_for(cfg.seed, DOC_STREAM + i as u64))?;
        row.copy_from_slice(&v);
        Ok::<_, Error>(())
    })?;

    let mut rng = rng_for(cfg.seed, ASSIGN_STREAM);
    let targets: Vec<usize> = if cfg.n_queries <= cfg.n_docs {
        sample(&mut rng, cfg.n_docs, cfg.n_queries).into_vec()
    } else {
        (0..cfg.n_queries).map(|_| rng.random_range(0..cfg.n_docs)).collect()
    };
    let mut queries = vec![0.0; cfg.n_queries * d];
    queries.par_chunks_mut(d).zip(targets.par_iter()).enumerate().try_for_each(|(j, (row, &t))| {
        let v = perturb(&docs[t * d..(t + 1) * d], cfg.noise, &mut rng_for(cfg.seed, QUERY_STREAM + j as u64))?;
        row.copy_from_slice(&v);
        Ok::<_, Error>(())
    })?;

    let doc_ids = padded_ids("doc-", cfg.n_docs);
    let query_ids = padded_ids("q-", cfg.n_queries);
    let labels = RelevanceLabels {
        entries: query_ids
            .iter()
            .zip(&targets)
            .map(|(q, &t)| QueryLabels {
                query: q.clone(),
                positives: vec![doc_ids[t].clone()],
                ..Default::default()
            })
            .collect(),
    };
    Ok(SynthCorpus {
        docs: EmbeddingMatrix::new(doc_ids, d, docs)?,
        queries: EmbeddingMatrix::new(query_ids, d, queries)?,
        labels,
        centers,
    })
}

impl SynthCorpus {
    /// Writes `emb.bin`, `q.bin` and `rels.jsonl` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, dtype: FloatDtype) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        save_embeddings(dir.join("emb.bin"), &self.docs, dtype)?;
        save_embeddings(dir.join("q.bin"), &self.queries, dtype)?;
        save_qrels(&self.labels, dir.join("rels.jsonl"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infeasible_separation() {
        let cfg = SynthConfig::new(20, 5, 2, 10, 0.1, 1);
        assert!(matches!(synth_corpus(&cfg), Err(Error::InfeasibleSeparation { .. })));
    }

    #[test]
    fn centers_are_separated_and_unit() {
        let c = synth_corpus(&SynthConfig::new(50, 10, 16, 5, 0.1, 3)).unwrap();
        for (i, a) in c.centers.iter().enumerate() {
            assert!((crate::vector::norm(a) - 1.0).abs() < 1e-12);
            for b in &c.centers[i + 1..] {
                assert!(cosine_unchecked(a, b) <= 0.3);
            }
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SynthConfig::new(40, 8, 8, 4, 0.2, 9);
        let a = synth_corpus(&cfg).unwrap();
        let b = synth_corpus(&cfg).unwrap();
        assert_eq!(a.docs, b.docs);
        assert_eq!(a.queries, b.queries);
        let c = synth_corpus(&SynthConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.docs, c.docs);
    }

    #[test]
    fn zero_noise_query_is_its_document() {
        let c = synth_corpus(&SynthConfig::new(30, 10, 8, 3, 0.0, 5)).unwrap();
        for l in &c.labels.entries {
            let q = c.queries.row(c.queries.position(&l.query).unwrap());
            let d = c.docs.row(c.docs.position(&l.positives[0]).unwrap());
            assert!(cosine_unchecked(q, d) > 1.0 - 1e-12);
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(synth_corpus(&SynthConfig::new(3, 1, 4, 5, 0.1, 0)).is_err());
        assert!(synth_corpus(&SynthConfig::new(10, 1, 4, 2, -0.1, 0)).is_err());
    }

    #[test]
    fn ids_zero_padded() {
        assert_eq!(padded_ids("d", 11), ["d00", "d01", "d02", "d03", "d04", "d05", "d06", "d07", "d08", "d09", "d10"]);
        assert_eq!(padded_ids("d", 1), ["d0"]);
    }
}
