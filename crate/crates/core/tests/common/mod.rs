//! Independent reference implementations and fixture helpers shared by the
//! integration tests and the acceptance runner.
//!
//! The oracles enumerate every term literally with plain loops and
//! `exp`/`ln`; none of them calls into the library's loss code.

#![allow(dead_code)]

use std::path::PathBuf;

use embrank::losses::{ContrastiveBatch, DistillBatch, Stage, StsBatch};
use embrank::Rows;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Contrastive loss with `Z_i` written out group by group.
pub fn infonce_oracle(b: &ContrastiveBatch) -> f64 {
    let n = b.len();
    let tau = b.temperature();
    let q = b.queries();
    let p = b.positives();
    let ids = b.positive_ids();
    let mut total = 0.0;
    for i in 0..n {
        let s_pos = cos(q.row(i), p.row(i));
        let keep = |s: f64, same_doc: bool| !(s > s_pos + 0.1 || same_doc);
        let numerator = (s_pos / tau).exp();
        let mut z = numerator;
        let negs = &b.hard_negatives()[i];
        for k in 0..negs.rows() {
            let s = cos(q.row(i), negs.row(k));
            if keep(s, b.negative_ids()[i][k] == ids[i]) {
                z += (s / tau).exp();
            }
        }
        for j in 0..n {
            if j == i {
                continue;
            }
            let same = ids[j] == ids[i];
            if b.stage() == Stage::Stage1 {
                let s = cos(q.row(i), q.row(j));
                if keep(s, same) {
                    z += (s / tau).exp();
                }
                let s = cos(p.row(i), p.row(j));
                if keep(s, same) {
                    z += (s / tau).exp();
                }
            }
            let s = cos(q.row(i), p.row(j));
            if keep(s, same) {
                z += (s / tau).exp();
            }
        }
        total += -(numerator / z).ln();
    }
    total / n as f64
}

pub fn classification_oracle(b: &ContrastiveBatch) -> f64 {
    let tau = b.temperature();
    let mut total = 0.0;
    for i in 0..b.len() {
        let q = b.queries().row(i);
        let numerator = (cos(q, b.positives().row(i)) / tau).exp();
        let mut z = numerator;
        let negs = &b.hard_negatives()[i];
        for k in 0..negs.rows() {
            z += (cos(q, negs.row(k)) / tau).exp();
        }
        total += -(numerator / z).ln();
    }
    total / b.len() as f64
}

pub fn cosent_oracle(b: &StsBatch) -> f64 {
    let tau = b.temperature();
    let s = b.scores();
    let c: Vec<f64> = (0..b.len())
        .map(|i| cos(b.queries().row(i), b.documents().row(i)))
        .collect();
    let mut sum = 0.0;
    for a in 0..b.len() {
        for m in 0..b.len() {
            if s[a] > s[m] {
                sum += ((c[m] - c[a]) / tau).exp();
            }
        }
    }
    (1.0 + sum).ln()
}

fn softmax_explicit(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn distill_oracle(b: &DistillBatch, tau_student: f64, tau_teacher: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..b.len() {
        let q = b.queries().row(i);
        let cands = &b.candidates()[i];
        let student: Vec<f64> = (0..cands.rows()).map(|k| cos(q, cands.row(k)) / tau_student).collect();
        let teacher: Vec<f64> = b.teacher_logits()[i].iter().map(|t| t / tau_teacher).collect();
        let ps = softmax_explicit(&student);
        let pt = softmax_explicit(&teacher);
        let mut ce = 0.0;
        for k in 0..ps.len() {
            ce -= pt[k] * ps[k].ln();
        }
        total += ce;
    }
    total / b.len() as f64
}

/// `−log p(label)` with `p(yes) = e^{y}/(e^{y}+e^{n})`.
pub fn rerank_loss_oracle(yes: bool, logit_yes: f64, logit_no: f64) -> f64 {
    let (a, b) = (logit_yes.exp(), logit_no.exp());
    let p = if yes { a / (a + b) } else { b / (a + b) };
    -p.ln()
}

pub fn rows(n: usize, d: usize, f: impl FnMut(usize) -> f64) -> Rows {
    Rows::new(n, d, (0..n * d).map(f).collect()).unwrap()
}

/// Removes every `latency_ms` key from a JSON value.
pub fn strip_latency(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.remove("latency_ms");
            for x in m.values_mut() {
                strip_latency(x);
            }
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_latency),
        _ => {}
    }
}

use embrank::gradcheck::{batch_rng, random_distill, random_sts, BatchShape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rows {
    Rows::new(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// A seeded contrastive batch whose documents repeat across queries, so the
/// identity rule of the mask is exercised alongside the margin rule.
pub fn contrastive_with_ids(seed: u64, index: u64, stage: Stage) -> ContrastiveBatch {
    let mut rng = batch_rng(seed, index);
    let n = rng.random_range(1..=8);
    let d = rng.random_range(2..=32);
    let pool = rng.random_range(1..=n + 2);
    let q = gaussian(&mut rng, n, d);
    let p = gaussian(&mut rng, n, d);
    let pos_ids: Vec<String> = (0..n).map(|_| format!("doc{}", rng.random_range(0..pool))).collect();
    let mut negs = Vec::with_capacity(n);
    let mut neg_ids = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..=4);
        negs.push(gaussian(&mut rng, k, d));
        neg_ids.push((0..k).map(|_| format!("doc{}", rng.random_range(0..pool + 3))).collect());
    }
    let tau = rng.random_range(0.05..1.0);
    ContrastiveBatch::new(q, p, negs, tau, stage)
        .unwrap()
        .with_ids(pos_ids, neg_ids)
        .unwrap()
}

pub fn sts(seed: u64, index: u64) -> StsBatch {
    random_sts(&mut batch_rng(seed, index), BatchShape::default()).unwrap()
}

pub fn distill(seed: u64, index: u64) -> DistillBatch {
    random_distill(&mut batch_rng(seed, index), BatchShape::default()).unwrap()
}

/// Largest |library − oracle| over `batches` seeded batches of every loss.
pub fn oracle_max_error(seed: u64, batches: u64) -> Vec<(&'static str, f64)> {
    use embrank::losses::{classification_loss, cosent_loss, distill_loss, retrieval_infonce};
    use embrank::rerank::{rerank_loss, RerankLabel};
    let mut worst = vec![
        ("retrieval stage 1", 0.0f64),
        ("retrieval stage 2", 0.0),
        ("classification", 0.0),
        ("cosent", 0.0),
        ("distill", 0.0),
        ("rerank", 0.0),
    ];
    for b in 0..batches {
        let s1 = contrastive_with_ids(seed, b, Stage::Stage1);
        let s2 = s1.clone().with_stage(Stage::Stage2);
        let e = [
            (retrieval_infonce(&s1).unwrap().value - infonce_oracle(&s1)).abs(),
            (retrieval_infonce(&s2).unwrap().value - infonce_oracle(&s2)).abs(),
            (classification_loss(&s1).unwrap().value - classification_oracle(&s1)).abs(),
            {
                let x = sts(seed, b);
                (cosent_loss(&x).unwrap().value - cosent_oracle(&x)).abs()
            },
            {
                let x = distill(seed, b);
                let ts = 0.5 + (b % 3) as f64 * 0.25;
                (distill_loss(&x, ts, 1.0).unwrap().value - distill_oracle(&x, ts, 1.0)).abs()
            },
            {
                let mut rng = batch_rng(seed ^ 0x5eed, b);
                let y: f64 = 4.0 * rng.sample::<f64, _>(StandardNormal);
                let n: f64 = 4.0 * rng.sample::<f64, _>(StandardNormal);
                let yes = rng.random_bool(0.5);
                let label = if yes { RerankLabel::Yes } else { RerankLabel::No };
                (rerank_loss(label, y, n) - rerank_loss_oracle(yes, y, n)).abs()
            },
        ];
        for (w, e) in worst.iter_mut().zip(e) {
            w.1 = w.1.max(e);
        }
    }
    worst
}

/// Mines the committed input fixture with K=10, t⁺=0.4, δ⁻=0.05 and compares
/// the dataset and audit output with the oracle's files byte for byte.
pub fn mining_fixture_mismatch() -> Option<String> {
    use embrank::dataset::{load_dataset, write_dataset};
    use embrank::mining::{mine, MiningConfig};
    let ds = load_dataset(fixture("mining/input.jsonl")).unwrap();
    let mined = mine(&ds, &MiningConfig::new(10, 0.4, 0.05).unwrap()).unwrap();
    let mut out = Vec::new();
    write_dataset(&mined.dataset, &mut out).unwrap();
    let expected = std::fs::read(fixture("mining/expected.jsonl")).unwrap();
    if out != expected {
        return Some(first_diff("expected.jsonl", &out, &expected));
    }
    let audit = mined.audit_jsonl().unwrap();
    let expected = std::fs::read(fixture("mining/expected_audit.jsonl")).unwrap();
    if audit.as_bytes() != expected.as_slice() {
        return Some(first_diff("expected_audit.jsonl", audit.as_bytes(), &expected));
    }
    None
}

fn first_diff(name: &str, got: &[u8], want: &[u8]) -> String {
    let g = String::from_utf8_lossy(got);
    let w = String::from_utf8_lossy(want);
    for (i, (a, b)) in g.lines().zip(w.lines()).enumerate() {
        if a != b {
            return format!("{name} line {}:\n  got  {a}\n  want {b}", i + 1);
        }
    }
    format!("{name}: {} lines vs {} lines", g.lines().count(), w.lines().count())
}

/// Kept sets shrink as t⁺ grows and negative sets grow with δ⁻, over a 5×5 grid.
pub fn mining_sweep_violation() -> Option<String> {
    use embrank::dataset::load_dataset;
    use embrank::mining::{mine, MiningConfig};
    use std::collections::BTreeSet;
    let ds = load_dataset(fixture("mining/input.jsonl")).unwrap();
    let ts = [0.2, 0.4, 0.6, 0.8, 0.9];
    let ds_ = [0.0, 0.02, 0.05, 0.1, 0.3];
    let mut grid = Vec::new();
    for &t in &ts {
        let mut row = Vec::new();
        for &d in &ds_ {
            let m = mine(&ds, &MiningConfig::new(10, t, d).unwrap()).unwrap();
            let kept: BTreeSet<String> = m.kept_queries().into_iter().map(String::from).collect();
            let negs: Vec<(String, BTreeSet<String>)> = kept
                .iter()
                .map(|q| (q.clone(), m.negatives_of(q).unwrap().iter().cloned().collect()))
                .collect();
            row.push((kept, negs));
        }
        grid.push(row);
    }
    for ti in 0..ts.len() {
        for di in 0..ds_.len() {
            let (kept, negs) = &grid[ti][di];
            if ti + 1 < ts.len() && !grid[ti + 1][di].0.is_subset(kept) {
                return Some(format!("kept set grew from t+={} to t+={}", ts[ti], ts[ti + 1]));
            }
            if di + 1 < ds_.len() {
                let next = &grid[ti][di + 1].1;
                for ((q, a), (_, b)) in negs.iter().zip(next) {
                    if !a.is_subset(b) {
                        return Some(format!("negatives of {q} shrank from d-={} to d-={}", ds_[di], ds_[di + 1]));
                    }
                }
            }
        }
    }
    None
}

fn golden(name: &str) -> String {
    String::from_utf8(std::fs::read(fixture(&format!("templates/{name}"))).unwrap()).unwrap()
}

/// Names of golden template files the renderers do not reproduce.
pub fn template_mismatches() -> Vec<&'static str> {
    let mut bad = Vec::new();
    let hello = embrank::dataset::Instance::text("x", "hello");
    if embrank::rerank::render_embedding_template("", &hello).unwrap() != golden("embedding_default.txt")
        || embrank::rerank::render_embedding_template(embrank::rerank::DEFAULT_INSTRUCTION, &hello).unwrap() != golden("embedding_default.txt")
    {
        bad.push("embedding_default");
    }
    let mm = embrank::dataset::Instance {
        id: "m".into(),
        parts: vec![
            embrank::dataset::Part::Text("A cat on a windowsill".into()),
            embrank::dataset::Part::Image("photos/cat.png".into()),
            embrank::dataset::Part::Video("clips/cat.mp4".into()),
        ],
        embedding: None,
    };
    if embrank::rerank::render_embedding_template("Retrieve images or text relevant to the user's query.", &mm).unwrap()
        != golden("embedding_multimodal.txt")
    {
        bad.push("embedding_multimodal");
    }
    let out = embrank::rerank::render_rerank_template(
        "Given a web search query, retrieve relevant passages that answer the query",
        &embrank::dataset::Instance::text("q", "what is the capital of France?"),
        &embrank::dataset::Instance::text("d", "Paris is the capital and largest city of France."),
    );
    if out != golden("rerank_text.txt") {
        bad.push("rerank_text");
    }
    let doc = embrank::dataset::Instance {
        id: "p".into(),
        parts: vec![embrank::dataset::Part::Image("pages/07.png".into()), embrank::dataset::Part::Text("Figure 3: quarterly revenue".into())],
        embedding: None,
    };
    let out = embrank::rerank::render_rerank_template("Find the page that shows the chart", &embrank::dataset::Instance::text("q", "revenue by quarter"), &doc);
    if out != golden("rerank_multimodal.txt") {
        bad.push("rerank_multimodal");
    }
    bad
}

pub fn param_set(seed: u64, shapes: &[(&str, usize, usize)]) -> embrank::merge::ParamSet {
    let mut rng = batch_rng(seed, 0);
    embrank::merge::ParamSet::from_arrays(
        shapes
            .iter()
            .map(|&(n, r, d)| (n.to_string(), gaussian(&mut rng, r, d))),
    )
    .unwrap()
}

/// Grid-searches mixing weights of two inputs against a target built from
/// `best`; returns the weights the search picked.
pub fn merge_search_pick(best: f64) -> Vec<f64> {
    use embrank::merge::grid_search_merge;
    let shapes = [("layer.0.weight", 8, 16), ("layer.0.bias", 1, 16), ("head", 4, 3)];
    let a = param_set(1, &shapes);
    let b = param_set(2, &shapes);
    let target: Vec<(String, Vec<f64>)> = a
        .iter()
        .zip(b.iter())
        .map(|((n, x), (_, y))| {
            (n.to_string(), x.data().iter().zip(y.data()).map(|(p, q)| (1.0 - best) * p + best * q).collect())
        })
        .collect();
    let candidates: Vec<Vec<f64>> = (0..=10).map(|i| vec![1.0 - i as f64 / 10.0, i as f64 / 10.0]).collect();
    let r = grid_search_merge(&[a, b], &candidates, |m| {
        let mut err = 0.0;
        for (n, t) in &target {
            for (x, y) in m.get(n).unwrap().data().iter().zip(t) {
                err += (x - y) * (x - y);
            }
        }
        Ok(-err)
    })
    .unwrap();
    r.weights
}

pub const BIN: &str = env!("CARGO_BIN_EXE_embrank");

pub struct CliOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn embrank(args: &[&str]) -> CliOutput {
    let out = std::process::Command::new(BIN).args(args).output().expect("binary runs");
    CliOutput {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn json_without_latency(path: &std::path::Path) -> Vec<u8> {
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    strip_latency(&mut v);
    serde_json::to_vec_pretty(&v).unwrap()
}

/// Positive documents get the largest yes/no gap; every other candidate
/// gets a gap from a fixed hash of its id.
pub fn oracle_logits(run: &embrank::metrics::RetrievalRun, labels: &embrank::dataset::RelevanceLabels) -> String {
    let mut out = String::new();
    for list in &run.queries {
        let pos = labels.positives_of(&list.query);
        for h in &list.hits {
            let gap = if pos.contains(&h.doc) {
                10.0
            } else {
                let hash = h.doc.bytes().fold(7u64, |a, b| a.wrapping_mul(31).wrapping_add(u64::from(b)));
                (hash % 1000) as f64 / 200.0 - 2.5
            };
            out.push_str(&format!(
                "{{\"query\":\"{}\",\"doc\":\"{}\",\"logit_yes\":{},\"logit_no\":0.0}}\n",
                list.query, h.doc, gap
            ));
        }
    }
    out
}

/// The mining fixture without its two queries that lack positives.
pub fn valid_dataset(dir: &std::path::Path) -> std::path::PathBuf {
    let text = std::fs::read_to_string(fixture("mining/input.jsonl")).unwrap();
    let kept: String = text
        .lines()
        .filter(|l| !l.contains("\"q17\"") && !l.contains("\"q18\""))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.join("valid.jsonl");
    std::fs::write(&path, kept).unwrap();
    path
}

/// Runs every subcommand with `--seed 42 --threads <threads>` in `dir` and
/// returns each numeric artifact, with latency fields removed.
pub fn cli_artifacts(dir: &std::path::Path, threads: usize) -> Vec<(String, Vec<u8>)> {
    let t = threads.to_string();
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let run = |args: &[&str]| {
        let mut full = vec!["--seed", "42", "--threads", t.as_str(), "--log-level", "quiet"];
        full.extend_from_slice(args);
        let out = embrank(&full);
        assert_eq!(out.code, 0, "{:?}: {}{}", args, out.stdout, out.stderr);
        out.stdout
    };
    let mut artifacts = Vec::new();
    let mut keep = |name: &str, bytes: Vec<u8>| artifacts.push((name.to_string(), bytes));

    run(&["synth-corpus", "--docs", "3000", "--queries", "120", "--dim", "64", "--clusters", "30", "--noise", "0.6", "--out-dir", &p("synth")]);
    for f in ["emb.bin", "q.bin", "rels.jsonl"] {
        keep(&format!("synth/{f}"), std::fs::read(dir.join("synth").join(f)).unwrap());
    }
    let emb = p("synth/emb.bin");
    let q = p("synth/q.bin");
    let rels = p("synth/rels.jsonl");

    run(&["bench", "--emb", &emb, "--queries", &q, "--qrels", &rels, "--dims", "16,32,64", "--out", &p("bench.json")]);
    keep("bench.json", json_without_latency(&dir.join("bench.json")));

    run(&["search", "--emb", &emb, "--queries", &q, "--dim", "32", "--precision", "int8", "--k", "100", "--out", &p("run.json"), "--index-out", &p("index.bin")]);
    keep("run.json", json_without_latency(&dir.join("run.json")));
    keep("index.bin", std::fs::read(dir.join("index.bin")).unwrap());

    let search_run = embrank::metrics::RetrievalRun::load(dir.join("run.json")).unwrap();
    let labels = embrank::dataset::load_qrels(&rels).unwrap();
    std::fs::write(dir.join("logits.jsonl"), oracle_logits(&search_run, &labels)).unwrap();
    let stdout = run(&["rerank", "--run", &p("run.json"), "--logits", &p("logits.jsonl"), "--qrels", &rels, "--out", &p("reranked.json")]);
    keep("rerank.stdout", stdout.into_bytes());
    keep("reranked.json", json_without_latency(&dir.join("reranked.json")));

    run(&["quantize", "--emb", &emb, "--precision", "binary", "--dim", "48", "--out", &p("bin.qvle")]);
    keep("bin.qvle", std::fs::read(dir.join("bin.qvle")).unwrap());
    run(&["quantize", "--emb", &emb, "--precision", "int8", "--out", &p("i8.qvle")]);
    keep("i8.qvle", std::fs::read(dir.join("i8.qvle")).unwrap());

    let valid = valid_dataset(dir);
    keep("validate.stdout", run(&["validate", valid.to_str().unwrap()]).into_bytes());
    let input = fixture("mining/input.jsonl");
    let input = input.to_str().unwrap();
    run(&["mine", "--dataset", input, "--k", "10", "--t-plus", "0.4", "--delta-minus", "0.05", "--out", &p("mined.jsonl"), "--audit", &p("audit.jsonl")]);
    keep("mined.jsonl", std::fs::read(dir.join("mined.jsonl")).unwrap());
    keep("audit.jsonl", std::fs::read(dir.join("audit.jsonl")).unwrap());

    run(&["loss-check", "--batches", "8", "--out", &p("grad.json")]);
    keep("grad.json", std::fs::read(dir.join("grad.json")).unwrap());

    let shapes = [("a", 3, 5), ("b", 1, 5)];
    param_set(1, &shapes).save(dir.join("m1.qvlp")).unwrap();
    param_set(2, &shapes).save(dir.join("m2.qvlp")).unwrap();
    run(&["merge", "--in", &format!("{},{}", p("m1.qvlp"), p("m2.qvlp")), "--weights", "0.25,0.75", "--out", &p("merged.qvlp")]);
    keep("merged.qvlp", std::fs::read(dir.join("merged.qvlp")).unwrap());
    artifacts
}
