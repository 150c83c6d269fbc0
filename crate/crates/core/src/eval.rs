//! Retrieval, STS and nearest-neighbour classification metrics over unit
//! embeddings, with exhaustive exact search.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::hash::Hash;
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::curation::format_instructed_query;
use crate::error::{Error, Result};
use crate::model::Embedder;

/// Texts embedded per worker before handing back.
const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl EmbeddingMatrix {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Cosine (dot) similarity of `query` to every row.
    pub fn similarities(&self, query: &[f64]) -> Vec<f64> {
        self.vectors.iter().map(|v| v.iter().zip(query).map(|(a, b)| a * b).sum()).collect()
    }
}

/// Queries get the instruction template when `task` is given; documents
/// are embedded as they are.
pub fn embed_texts(
    ids: &[String],
    texts: &[String],
    ckpt: &Checkpoint<f64>,
    task: Option<&str>,
) -> Result<EmbeddingMatrix> {
    if ids.len() != texts.len() {
        return Err(Error::Dimension(format!("{} ids for {} texts", ids.len(), texts.len())));
    }
    let chunks: Vec<Vec<Vec<f64>>> = texts
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut embedder = Embedder::new(ckpt)?;
            chunk
                .iter()
                .map(|t| match task {
                    Some(task) => embedder.embed_text(&format_instructed_query(task, t)?),
                    None => embedder.embed_text(t),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(EmbeddingMatrix { ids: ids.to_vec(), vectors: chunks.into_iter().flatten().collect() })
}

/// Row indices by descending score, ties to the lower index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades.enumerate().map(|(i, g)| (2f64.powi(g as i32) - 1.0) / (i as f64 + 2.0).log2()).sum()
}

/// DCG@k with gain `2^grade − 1` over the ideal DCG@k; zero without any
/// relevant document.
pub fn ndcg_at_k<I: Eq + Hash>(ranking: &[I], relevance: &HashMap<I, u32>, k: usize) -> f64 {
    let mut ideal: Vec<u32> = relevance.values().copied().filter(|&g| g > 0).collect();
    if ideal.is_empty() || k == 0 {
        return 0.0;
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    let got = dcg(ranking.iter().take(k).map(|id| relevance.get(id).copied().unwrap_or(0)));
    got / idcg
}

pub fn recall_at_k<I: Eq + Hash>(ranking: &[I], relevant: &HashSet<I>, k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Contract("recall needs at least one relevant document".into()));
    }
    let hits = ranking.iter().take(k).filter(|id| relevant.contains(id)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        order[i..=j].iter().for_each(|&o| ranks[o] = avg);
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input(format!("spearman needs two equal series of length ≥ 2, got {} and {}", x.len(), y.len())));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numeric("spearman undefined for constant ranks".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Majority vote among the `k` most similar training rows. Ties go to the
/// label with the smaller summed distance, then the smaller label.
pub fn knn_predict<L: Ord + Clone>(train: &EmbeddingMatrix, labels: &[L], query: &[f64], k: usize) -> L {
    let sims = train.similarities(query);
    let order = rank_by_score(&sims);
    let mut votes: BTreeMap<&L, (usize, f64)> = BTreeMap::new();
    for &i in order.iter().take(k.max(1)) {
        let e = votes.entry(&labels[i]).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += 1.0 - sims[i];
    }
    let mut best: Option<(&L, (usize, f64))> = None;
    for (label, (count, dist)) in votes {
        best = match best {
            Some((_, (bc, bd))) if bc > count || (bc == count && bd <= dist) => best,
            _ => Some((label, (count, dist))),
        };
    }
    best.expect("at least one neighbour").0.clone()
}

pub fn knn_classify<L: Ord + Clone + Sync>(
    train: &EmbeddingMatrix,
    train_labels: &[L],
    test: &EmbeddingMatrix,
    test_labels: &[L],
    k: usize,
) -> Result<f64> {
    if train.is_empty() || train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(Error::Input("knn needs a non-empty train set and one label per row".into()));
    }
    if test.is_empty() {
        return Ok(0.0);
    }
    let correct = test
        .vectors
        .par_iter()
        .zip(test_labels)
        .filter(|(v, l)| knn_predict(train, train_labels, v, k) == **l)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

// ---- reports ----------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
}

impl EvalReport {
    /// `key=value` lines: task, metrics, then per-query diagnostics.
    pub fn to_text(&self) -> String {
        let mut out = format!("task={}\n", self.task);
        for (k, v) in &self.metrics {
            writeln!(out, "{k}={v}").expect("string write");
        }
        for (q, m) in &self.per_query {
            for (k, v) in m {
                writeln!(out, "query.{q}.{k}={v}").expect("string write");
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Qrel {
    pub query: String,
    pub doc: String,
    pub grade: u32,
}

/// Exact cosine search of every query against the whole corpus.
pub fn retrieval_metrics(
    queries: &EmbeddingMatrix,
    corpus: &EmbeddingMatrix,
    qrels: &[Qrel],
    k: usize,
) -> Result<EvalReport> {
    let qids: HashSet<&str> = queries.ids.iter().map(String::as_str).collect();
    let dids: HashSet<&str> = corpus.ids.iter().map(String::as_str).collect();
    let mut dangling: Vec<String> = Vec::new();
    for r in qrels {
        if !qids.contains(r.query.as_str()) {
            dangling.push(format!("query {}", r.query));
        }
        if !dids.contains(r.doc.as_str()) {
            dangling.push(format!("doc {}", r.doc));
        }
    }
    if !dangling.is_empty() {
        dangling.dedup();
        return Err(Error::Validation(format!("qrels reference unknown ids: {}", dangling.join(", "))));
    }
    let mut graded: HashMap<&str, HashMap<&str, u32>> = HashMap::new();
    for r in qrels {
        graded.entry(r.query.as_str()).or_default().insert(r.doc.as_str(), r.grade);
    }
    let per: Vec<Option<(String, BTreeMap<String, f64>)>> = queries
        .ids
        .par_iter()
        .zip(&queries.vectors)
        .map(|(qid, v)| {
            let Some(rel) = graded.get(qid.as_str()) else { return Ok(None) };
            let relevant: HashSet<&str> = rel.iter().filter(|(_, &g)| g > 0).map(|(d, _)| *d).collect();
            if relevant.is_empty() {
                return Ok(None);
            }
            let ranking: Vec<&str> =
                rank_by_score(&corpus.similarities(v)).into_iter().map(|i| corpus.ids[i].as_str()).collect();
            let mut m = BTreeMap::new();
            m.insert(format!("ndcg@{k}"), ndcg_at_k(&ranking, rel, k));
            m.insert("recall@1".to_string(), recall_at_k(&ranking, &relevant, 1)?);
            m.insert(format!("recall@{k}"), recall_at_k(&ranking, &relevant, k)?);
            Ok(Some((qid.clone(), m)))
        })
        .collect::<Result<_>>()?;
    let per_query: BTreeMap<String, BTreeMap<String, f64>> = per.into_iter().flatten().collect();
    let mut metrics = BTreeMap::new();
    if !per_query.is_empty() {
        let n = per_query.len() as f64;
        for key in per_query.values().next().expect("non-empty").keys() {
            metrics.insert(key.clone(), per_query.values().map(|m| m[key]).sum::<f64>() / n);
        }
    }
    metrics.insert("queries".to_string(), per_query.len() as f64);
    Ok(EvalReport { task: "retrieval".into(), metrics, per_query })
}

/// Retrieval data: `(id, text)` queries and documents plus graded qrels.
#[derive(Clone, Debug, Default)]
pub struct RetrievalSet {
    pub queries: Vec<(String, String)>,
    pub corpus: Vec<(String, String)>,
    pub qrels: Vec<Qrel>,
}

fn unzip(pairs: &[(String, String)]) -> (Vec<String>, Vec<String>) {
    pairs.iter().cloned().unzip()
}

pub fn run_retrieval_eval(set: &RetrievalSet, ckpt: &Checkpoint<f64>, task: &str, k: usize) -> Result<EvalReport> {
    let (qids, qtexts) = unzip(&set.queries);
    let (dids, dtexts) = unzip(&set.corpus);
    let q = embed_texts(&qids, &qtexts, ckpt, Some(task))?;
    let d = embed_texts(&dids, &dtexts, ckpt, None)?;
    retrieval_metrics(&q, &d, &set.qrels, k)
}

/// Spearman between cosine similarity and gold scores; both sides of each
/// pair get the instruction.
pub fn run_sts_eval(pairs: &[(String, String, f64)], ckpt: &Checkpoint<f64>, task: &str) -> Result<EvalReport> {
    let a: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
    let b: Vec<String> = pairs.iter().map(|p| p.1.clone()).collect();
    let ids: Vec<String> = (0..pairs.len()).map(|i| i.to_string()).collect();
    let ea = embed_texts(&ids, &a, ckpt, Some(task))?;
    let eb = embed_texts(&ids, &b, ckpt, Some(task))?;
    let sims: Vec<f64> =
        ea.vectors.iter().zip(&eb.vectors).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect();
    let gold: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let mut metrics = BTreeMap::new();
    metrics.insert("spearman".to_string(), spearman(&sims, &gold)?);
    metrics.insert("pairs".to_string(), pairs.len() as f64);
    Ok(EvalReport { task: "sts".into(), metrics, per_query: BTreeMap::new() })
}

/// `(label, text)` rows.
pub type LabeledRows = Vec<(String, String)>;

pub fn run_classification_eval(
    train: &LabeledRows,
    test: &LabeledRows,
    ckpt: &Checkpoint<f64>,
    task: &str,
    k: usize,
) -> Result<EvalReport> {
    let embed = |rows: &LabeledRows| {
        let ids: Vec<String> = (0..rows.len()).map(|i| i.to_string()).collect();
        let texts: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
        embed_texts(&ids, &texts, ckpt, Some(task))
    };
    let labels = |rows: &LabeledRows| rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>();
    let accuracy = knn_classify(&embed(train)?, &labels(train), &embed(test)?, &labels(test), k)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("accuracy".to_string(), accuracy);
    metrics.insert("k".to_string(), k as f64);
    Ok(EvalReport { task: "classification".into(), metrics, per_query: BTreeMap::new() })
}

// ---- data files -------------------------------------------------------------

fn read_tsv(path: &Path, fields: usize) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let parts: Vec<String> = line.splitn(fields, '\t').map(String::from).collect();
            if parts.len() != fields {
                return Err(Error::Input(format!("{}:{}: expected {fields} tab-separated fields", path.display(), n + 1)));
            }
            Ok(parts)
        })
        .collect()
}

fn pairs(rows: Vec<Vec<String>>) -> Vec<(String, String)> {
    rows.into_iter().map(|mut r| (std::mem::take(&mut r[0]), std::mem::take(&mut r[1]))).collect()
}

fn parse_num<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Input(format!("{}: bad number {s:?}", path.display())))
}

/// `queries.tsv` and `corpus.tsv` (`id<TAB>text`), `qrels.tsv`
/// (`query_id<TAB>doc_id<TAB>grade`).
pub fn load_retrieval_dir(dir: &Path) -> Result<RetrievalSet> {
    let qrels_path = dir.join("qrels.tsv");
    let qrels = read_tsv(&qrels_path, 3)?
        .into_iter()
        .map(|r| Ok(Qrel { query: r[0].clone(), doc: r[1].clone(), grade: parse_num(&qrels_path, &r[2])? }))
        .collect::<Result<_>>()?;
    Ok(RetrievalSet {
        queries: pairs(read_tsv(&dir.join("queries.tsv"), 2)?),
        corpus: pairs(read_tsv(&dir.join("corpus.tsv"), 2)?),
        qrels,
    })
}

/// `pairs.tsv`: `text_a<TAB>text_b<TAB>score`.
pub fn load_sts_dir(dir: &Path) -> Result<Vec<(String, String, f64)>> {
    let path = dir.join("pairs.tsv");
    read_tsv(&path, 3)?.into_iter().map(|r| Ok((r[0].clone(), r[1].clone(), parse_num(&path, &r[2])?))).collect()
}

/// `train.tsv` and `test.tsv`: `label<TAB>text`.
pub fn load_classification_dir(dir: &Path) -> Result<(LabeledRows, LabeledRows)> {
    Ok((pairs(read_tsv(&dir.join("train.tsv"), 2)?), pairs(read_tsv(&dir.join("test.tsv"), 2)?)))
}
