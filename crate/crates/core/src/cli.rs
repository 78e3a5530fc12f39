//! Command-line front end. `run` parses argv, merges an optional
//! `key=value` config file (flags > config > defaults) and dispatches.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::bench::{bench_grid, LatencyStats};
use crate::dataset::{load_dataset, load_qrels, save_dataset, validate_dataset, Instance};
use crate::error::Error;
use crate::gradcheck::{run_grad_check, BatchShape, LossKind, Wrapper};
use crate::index::{build_index, IndexSpec, Precision};
use crate::io::{
    load_embeddings, write_atomic, write_embedding_file, EmbeddingFile, FloatDtype, Payload,
};
use crate::merge::{merge_checkpoints, ParamSet};
use crate::metrics::{mrr_at_k, RetrievalRun};
use crate::mining::{mine, MatrixEmbedder, MiningConfig};
use crate::quant::{init_delta, lsq_forward, pack_signs, INT8_QN, INT8_QP};
use crate::rerank::{rerank_run, FileScorer, DEFAULT_TOP_N};
use crate::synth::{synth_corpus, SynthConfig};
use crate::vector::l2_normalize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "embrank", version, about = "Embedding objectives, quantized search, mining and reranking tools")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// File of `key=value` lines supplying defaults for long flags.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    pub log_level: LogLevel,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogLevel {
    Quiet,
    Info,
    Debug,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a dataset file against every structural invariant.
    Validate(ValidateArgs),
    /// Refine positives and select hard negatives from exact top-K recall.
    Mine(MineArgs),
    /// Compare analytic loss gradients with finite differences on random batches.
    LossCheck(LossCheckArgs),
    /// Quantize an embedding file to int8 (global step) or sign bits.
    Quantize(QuantizeArgs),
    /// Measure quality, storage and latency over a dimension × precision grid.
    Bench(BenchArgs),
    /// Exact search of a query file against an index built from an embedding file.
    Search(SearchArgs),
    /// Rerank a retrieval run with precomputed yes/no logits.
    Rerank(RerankArgs),
    /// Weighted linear merge of parameter-set files.
    Merge(MergeArgs),
    /// Generate a seeded clustered corpus with queries and qrels.
    SynthCorpus(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub dataset: PathBuf,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Embedding file keyed by instance id; takes precedence over inline embeddings.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Candidates per query (placeholder default, no published value).
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    /// Positive threshold t⁺ (placeholder default, no published value).
    #[arg(long, default_value_t = 0.4, allow_negative_numbers = true)]
    pub t_plus: f64,
    /// Hard-negative margin δ⁻ (placeholder default, no published value).
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    pub delta_minus: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub audit: PathBuf,
}

#[derive(Debug, Args)]
pub struct LossCheckArgs {
    /// Losses to check, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub loss: Vec<String>,
    /// Wrappers: plain, mrl, qat, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub wrapper: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub batches: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Tolerance for the int8 step-size gradient.
    #[arg(long, default_value_t = 1e-4)]
    pub delta_tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub emb: PathBuf,
    #[arg(long)]
    pub precision: Precision,
    /// Keep this many leading components, then re-normalize.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Int8 step size; defaults to 2·mean|v|/√127 over all values.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub emb: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    /// Prefix dimensions; defaults to 64..2048 by powers of two, capped at the full dimension.
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "f32,int8,binary")]
    pub precisions: Vec<Precision>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub emb: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Prefix dimension; defaults to the full dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value = "f32")]
    pub precision: Precision,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the encoded index.
    #[arg(long)]
    pub index_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// JSONL of {"query","doc","logit_yes","logit_no"}.
    #[arg(long)]
    pub logits: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_N)]
    pub top_n: usize,
    #[arg(long, default_value = "")]
    pub instruction: String,
    /// Report MRR@10 before and after reranking.
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long = "in", value_delimiter = ',', required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub weights: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10_000)]
    pub docs: usize,
    #[arg(long, default_value_t = 1_000)]
    pub queries: usize,
    #[arg(long, default_value_t = 1024)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.3)]
    pub spread: f64,
    #[arg(long, default_value_t = 0.3)]
    pub max_center_cosine: f64,
    #[arg(long, value_enum, default_value_t = FileDtype::F32)]
    pub dtype: FileDtype,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FileDtype {
    F32,
    F64,
}

impl From<FileDtype> for FloatDtype {
    fn from(d: FileDtype) -> Self {
        match d {
            FileDtype::F32 => FloatDtype::F32,
            FileDtype::F64 => FloatDtype::F64,
        }
    }
}

/// Parses `key=value` lines; `#` starts a comment, surrounding quotes are stripped.
pub fn parse_config(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with('[') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key=value", i + 1);
        };
        let key = k.trim().replace('_', "-");
        let v = v.trim();
        let v = v
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(v);
        out.push((key, v.to_string()));
    }
    Ok(out)
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn has_flag(argv: &[OsString], key: &str) -> bool {
    let flag = format!("--{key}");
    let eq = format!("--{key}=");
    argv.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.starts_with(&eq)
    })
}

/// Appends config entries not already given as flags; returns the keys used.
fn merge_config(argv: &mut Vec<OsString>, entries: &[(String, String)]) -> Vec<String> {
    let mut used = Vec::new();
    for (k, v) in entries {
        if !has_flag(argv, k) {
            argv.push(format!("--{k}={v}").into());
            used.push(k.clone());
        }
    }
    used
}

fn describe(matches: &ArgMatches, from_config: &[String]) -> Vec<String> {
    let mut lines: Vec<(String, String)> = Vec::new();
    let mut push = |m: &ArgMatches| {
        for id in m.ids() {
            let id = id.as_str();
            // derive-generated group ids are the struct names
            if id.starts_with(|c: char| c.is_ascii_uppercase()) {
                continue;
            }
            let Ok(Some(raw)) = m.try_get_raw(id) else { continue };
            let values: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            let key = id.replace('_', "-");
            let source = match m.value_source(id) {
                Some(ValueSource::DefaultValue) => "default",
                _ if from_config.contains(&key) => "config",
                _ => "flag",
            };
            let line = format!("  {key} = {} ({source})", values.join(","));
            match lines.iter_mut().find(|(k, _)| *k == key) {
                Some(slot) => slot.1 = line,
                None => lines.push((key, line)),
            }
        }
    };
    push(matches);
    if let Some((_, sub)) = matches.subcommand() {
        push(sub);
    }
    lines.into_iter().map(|(_, l)| l).collect()
}

/// Entry point of the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let mut argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let mut from_config = Vec::new();
    if let Some(path) = config_path(&argv) {
        let entries = std::fs::read_to_string(&path)
            .map_err(anyhow::Error::from)
            .and_then(|t| parse_config(&t));
        match entries {
            Ok(entries) => from_config = merge_config(&mut argv, &entries),
            Err(e) => {
                eprintln!("error: config {}: {e:#}", path.display());
                return EXIT_USAGE;
            }
        }
    }
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    if cli.log_level != LogLevel::Quiet {
        let name = matches.subcommand_name().unwrap_or("");
        eprintln!("embrank {name}");
        for line in describe(&matches, &from_config) {
            eprintln!("{line}");
        }
    }
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_FAILURE;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::InvalidArgument(_)) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<i32> {
    let log = cli.log_level != LogLevel::Quiet;
    match &cli.command {
        Command::Validate(a) => validate(a),
        Command::Mine(a) => mine_cmd(a, log),
        Command::LossCheck(a) => loss_check(a, cli.seed),
        Command::Quantize(a) => quantize(a),
        Command::Bench(a) => bench(a),
        Command::Search(a) => search(a, log),
        Command::Rerank(a) => rerank(a, log),
        Command::Merge(a) => merge(a),
        Command::SynthCorpus(a) => synth(a, cli.seed, log),
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    write_atomic(path, |f| {
        use std::io::Write;
        f.write_all(text.as_bytes())?;
        Ok(())
    })?;
    Ok(())
}

fn validate(a: &ValidateArgs) -> anyhow::Result<i32> {
    let ds = match load_dataset(&a.dataset) {
        Ok(ds) => ds,
        Err(e) => {
            eprintln!("invalid: {e}");
            return Ok(EXIT_FAILURE);
        }
    };
    let report = validate_dataset(&ds);
    if report.is_empty() {
        println!(
            "ok: {} queries, {} documents, {} labelled queries",
            ds.queries.len(),
            ds.corpus.len(),
            ds.relevance.entries.len()
        );
        Ok(EXIT_OK)
    } else {
        for v in &report.violations {
            eprintln!("invalid: {v}");
        }
        eprintln!("{} violation(s)", report.len());
        Ok(EXIT_FAILURE)
    }
}

fn mine_cmd(a: &MineArgs, log: bool) -> anyhow::Result<i32> {
    let ds = load_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let mut cfg = MiningConfig::new(a.k, a.t_plus, a.delta_minus)?;
    if let Some(p) = &a.embeddings {
        cfg = cfg.with_embedder(MatrixEmbedder::new(load_embeddings(p)?));
    }
    let mined = mine(&ds, &cfg)?;
    save_dataset(&mined.dataset, &a.out)?;
    write_text(&a.audit, &mined.audit_jsonl()?)?;
    if log {
        eprintln!("kept {} of {} queries", mined.kept_queries().len(), ds.queries.len());
    }
    Ok(EXIT_OK)
}

fn expand<T: Copy>(names: &[String], all: &[T], parse: impl Fn(&str) -> anyhow::Result<T>) -> anyhow::Result<Vec<T>> {
    if names.iter().any(|n| n == "all") {
        return Ok(all.to_vec());
    }
    names.iter().map(|n| parse(n)).collect()
}

fn loss_check(a: &LossCheckArgs, seed: u64) -> anyhow::Result<i32> {
    let losses = expand(&a.loss, &LossKind::ALL, |s| Ok(s.parse::<LossKind>()?))?;
    let wrappers = expand(&a.wrapper, &Wrapper::ALL, |s| {
        Ok(match s {
            "plain" => Wrapper::Plain,
            "mrl" => Wrapper::Mrl,
            "qat" => Wrapper::Qat,
            other => return Err(Error::InvalidArgument(format!("unknown wrapper `{other}`")).into()),
        })
    })?;
    let mut reports = Vec::new();
    let mut failed = false;
    for &loss in &losses {
        for &wrapper in &wrappers {
            let r = run_grad_check(loss, wrapper, a.batches, seed, BatchShape::default(), a.eps)?;
            let ok = r.max_rel_error <= a.tol && r.max_delta_rel_error.is_none_or(|e| e <= a.delta_tol);
            failed |= !ok;
            let delta = r.max_delta_rel_error.map(|e| format!(" delta {e:.3e}")).unwrap_or_default();
            println!(
                "{} {:<16} {:<6} max rel error {:.3e}{delta}",
                if ok { "PASS" } else { "FAIL" },
                loss.as_str(),
                format!("{:?}", wrapper).to_lowercase(),
                r.max_rel_error
            );
            reports.push(r);
        }
    }
    if let Some(out) = &a.out {
        write_text(out, &(serde_json::to_string_pretty(&reports)? + "\n"))?;
    }
    Ok(if failed { EXIT_FAILURE } else { EXIT_OK })
}

fn quantize(a: &QuantizeArgs) -> anyhow::Result<i32> {
    let m = load_embeddings(&a.emb)?;
    let d = a.dim.unwrap_or(m.dim());
    if d == 0 || d > m.dim() {
        return Err(Error::BadDim { dim: d, full: m.dim() }.into());
    }
    let mut rows = Vec::with_capacity(m.rows() * d);
    for i in 0..m.rows() {
        let r = &m.row(i)[..d];
        if d == m.dim() {
            rows.extend_from_slice(r);
        } else {
            rows.extend(l2_normalize(r)?);
        }
    }
    let payload = match a.precision {
        Precision::F32 => Payload::F32(rows.iter().map(|&x| x as f32).collect()),
        Precision::F64 => Payload::F64(rows),
        Precision::Int8 => {
            let delta = a.delta.unwrap_or_else(|| init_delta(&rows, INT8_QP));
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(Error::InvalidArgument(format!("step size must be positive, got {delta}")).into());
            }
            let (_, q) = lsq_forward(&rows, delta, INT8_QN, INT8_QP);
            Payload::I8 {
                codes: q.into_iter().map(|c| c as i8).collect(),
                delta,
            }
        }
        Precision::Binary => Payload::Bits(rows.chunks(d).flat_map(pack_signs).collect()),
    };
    let file = EmbeddingFile {
        dim: d,
        ids: m.ids().to_vec(),
        payload,
    };
    write_embedding_file(&a.out, &file)?;
    println!("{} rows, {} payload bytes", file.count(), file.payload_bytes());
    Ok(EXIT_OK)
}

fn default_dims(full: usize) -> Vec<usize> {
    let mut dims: Vec<usize> = [64, 128, 256, 512, 1024, 2048].into_iter().filter(|&d| d < full).collect();
    dims.push(full);
    dims
}

fn bench(a: &BenchArgs) -> anyhow::Result<i32> {
    let docs = load_embeddings(&a.emb)?;
    let queries = load_embeddings(&a.queries)?;
    let labels = load_qrels(&a.qrels)?;
    let dims = if a.dims.is_empty() { default_dims(docs.dim()) } else { a.dims.clone() };
    let report = bench_grid(&docs, &queries, &labels, &dims, &a.precisions, a.k)?;
    report.save(&a.out)?;
    print!("{}", report.summary(a.k));
    Ok(EXIT_OK)
}

fn search(a: &SearchArgs, log: bool) -> anyhow::Result<i32> {
    let docs = load_embeddings(&a.emb)?;
    let queries = load_embeddings(&a.queries)?;
    let spec = IndexSpec::new(a.dim.unwrap_or(docs.dim()), a.precision);
    let index = build_index(&docs, spec)?;
    if let Some(p) = &a.index_out {
        index.save(p)?;
    }
    let mut run = index.search_all(&queries, a.k)?;
    let lat = LatencyStats::from_samples(&run.latency_ms);
    run.latency_ms.clear();
    run.save(&a.out)?;
    if log {
        eprintln!(
            "{} queries, index {} bytes, latency mean {:.3} ms p50 {:.3} p99 {:.3}",
            run.queries.len(),
            index.storage_bytes(),
            lat.mean,
            lat.p50,
            lat.p99
        );
    }
    Ok(EXIT_OK)
}

fn rerank(a: &RerankArgs, log: bool) -> anyhow::Result<i32> {
    let run = RetrievalRun::load(&a.run)?;
    let scorer = FileScorer::load(&a.logits)?;
    let empty: HashMap<String, Instance> = HashMap::new();
    let reranked = rerank_run(&run, &scorer, &a.instruction, &empty, &empty, a.top_n)?;
    reranked.save(&a.out)?;
    if let Some(q) = &a.qrels {
        let labels = load_qrels(q)?;
        println!(
            "MRR@10 retrieval {:.6} reranked {:.6}",
            mrr_at_k(&run, &labels, 10),
            mrr_at_k(&reranked, &labels, 10)
        );
    } else if log {
        eprintln!("reranked {} queries", reranked.queries.len());
    }
    Ok(EXIT_OK)
}

fn merge(a: &MergeArgs) -> anyhow::Result<i32> {
    let inputs = a
        .inputs
        .iter()
        .map(|p| ParamSet::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let merged = merge_checkpoints(&inputs, &a.weights)?;
    merged.save(&a.out)?;
    println!("merged {} arrays from {} inputs", merged.len(), inputs.len());
    Ok(EXIT_OK)
}

fn synth(a: &SynthArgs, seed: u64, log: bool) -> anyhow::Result<i32> {
    let cfg = SynthConfig {
        spread: a.spread,
        max_center_cosine: a.max_center_cosine,
        ..SynthConfig::new(a.docs, a.queries, a.dim, a.clusters, a.noise, seed)
    };
    let corpus = synth_corpus(&cfg)?;
    corpus.save(&a.out_dir, a.dtype.into())?;
    if log {
        eprintln!("wrote emb.bin, q.bin, rels.jsonl to {}", a.out_dir.display());
    }
    Ok(EXIT_OK)
}
