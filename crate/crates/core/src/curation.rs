//! Turning raw corpora into contrastive training examples: the instructed
//! query template, positive-aware hard-negative mining, multi-class and STS
//! pair construction, and blended JSONL datasets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::Embedder;

/// Default number of hard negatives per example.
pub const DEFAULT_NEGATIVES: usize = 7;
/// Pairs scoring at least this much become positives.
pub const STS_MIN_SCORE: f64 = 4.0;

const INSTRUCT: &str = "Instruct: ";
const QUERY: &str = " Query: ";

/// `Instruct: {task_definition} Query: {query}`.
pub fn format_instructed_query(task_definition: &str, query: &str) -> Result<String> {
    if task_definition.is_empty() {
        return Err(Error::Input("empty task definition".into()));
    }
    if query.is_empty() {
        return Err(Error::Input("empty query".into()));
    }
    Ok(format!("{INSTRUCT}{task_definition}{QUERY}{query}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub task_definition: String,
    pub query: String,
    pub positive: String,
    #[serde(default)]
    pub negatives: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_score: Option<f64>,
    /// Instruction is also applied to the documents.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub symmetric: bool,
    /// Name of the dataset the example came from.
    #[serde(skip)]
    pub source_dataset: String,
}

impl TrainingExample {
    pub fn new(task_definition: &str, query: &str, positive: &str, negatives: Vec<String>) -> Self {
        Self {
            task_definition: task_definition.into(),
            query: query.into(),
            positive: positive.into(),
            negatives,
            label: None,
            pair_score: None,
            symmetric: false,
            source_dataset: String::new(),
        }
    }

    pub fn query_text(&self) -> Result<String> {
        format_instructed_query(&self.task_definition, &self.query)
    }

    /// Document text as fed to the encoder.
    pub fn document_text(&self, doc: &str) -> Result<String> {
        if self.symmetric {
            format_instructed_query(&self.task_definition, doc)
        } else {
            Ok(doc.to_string())
        }
    }

    pub fn validate(&self, max_negatives: usize) -> Result<()> {
        if self.negatives.iter().any(|n| n == &self.positive) {
            return Err(Error::Validation(format!("positive {:?} appears among the negatives", self.positive)));
        }
        if self.negatives.len() > max_negatives {
            return Err(Error::Validation(format!(
                "{} negatives, at most {max_negatives} allowed",
                self.negatives.len()
            )));
        }
        Ok(())
    }
}

// ---- mining ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiningConfig {
    pub top_k: usize,
    pub percentage_margin: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { top_k: DEFAULT_NEGATIVES, percentage_margin: 0.95 }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.percentage_margin > 0.0 && self.percentage_margin <= 1.0) {
            return Err(Error::Config(format!("percentage margin {} outside (0, 1]", self.percentage_margin)));
        }
        Ok(())
    }
}

/// Scores (instructed query, document) pairs.
pub trait Teacher: Sync {
    fn score(&self, query: &str, docs: &[&str]) -> Result<Vec<f64>>;
}

/// Cosine similarity under an embedding checkpoint. Document embeddings are
/// cached across calls.
pub struct CheckpointTeacher {
    ckpt: Checkpoint<f64>,
    docs: RwLock<HashMap<String, Vec<f64>>>,
}

impl CheckpointTeacher {
    pub fn new(ckpt: Checkpoint<f64>) -> Self {
        Self { ckpt, docs: RwLock::new(HashMap::new()) }
    }

    fn doc_embedding(&self, embedder: &mut Embedder<'_, f64>, doc: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.docs.read().unwrap().get(doc) {
            return Ok(v.clone());
        }
        let v = embedder.embed_text(doc)?;
        self.docs.write().unwrap().insert(doc.to_string(), v.clone());
        Ok(v)
    }
}

impl Teacher for CheckpointTeacher {
    fn score(&self, query: &str, docs: &[&str]) -> Result<Vec<f64>> {
        let mut embedder = Embedder::new(&self.ckpt)?;
        let q = embedder.embed_text(query)?;
        docs.iter()
            .map(|d| {
                let v = self.doc_embedding(&mut embedder, d)?;
                Ok(q.iter().zip(&v).map(|(a, b)| a * b).sum())
            })
            .collect()
    }
}

/// Precomputed scores keyed by (instructed query, document).
#[derive(Clone, Debug, Default)]
pub struct ScoreTable {
    scores: HashMap<(String, String), f64>,
}

impl ScoreTable {
    pub fn insert(&mut self, query: &str, doc: &str, score: f64) {
        self.scores.insert((query.to_string(), doc.to_string()), score);
    }

    /// Reads `query<TAB>doc<TAB>score` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = Self::default();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split('\t').collect();
            let [q, d, s] = parts[..] else {
                return Err(Error::Format(format!("{}:{}: expected 3 tab-separated fields", path.display(), n + 1)));
            };
            let s: f64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("{}:{}: bad score {s:?}", path.display(), n + 1)))?;
            table.insert(q, d, s);
        }
        Ok(table)
    }
}

impl Teacher for ScoreTable {
    fn score(&self, query: &str, docs: &[&str]) -> Result<Vec<f64>> {
        docs.iter()
            .map(|d| {
                self.scores
                    .get(&(query.to_string(), d.to_string()))
                    .copied()
                    .ok_or_else(|| Error::Input(format!("no teacher score for ({query:?}, {d:?})")))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mined {
    pub negatives: Vec<String>,
    pub scores: Vec<f64>,
    pub positive_score: f64,
    pub threshold: f64,
    /// Fewer than `top_k` candidates survived the filter.
    pub short: bool,
}

/// Positive-aware hard-negative mining: drops the positive and every
/// document scoring at or above `pos_score × margin`, then keeps the
/// `top_k` best remaining, descending by score with ties to the earlier
/// corpus entry. Duplicate documents are considered once.
pub fn mine_hard_negatives(
    query: &str,
    positive: &str,
    corpus: &[String],
    teacher: &dyn Teacher,
    cfg: &MiningConfig,
) -> Result<Mined> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Validation("mining corpus is empty".into()));
    }
    let mut seen = HashSet::new();
    let candidates: Vec<&str> =
        corpus.iter().map(String::as_str).filter(|d| *d != positive && seen.insert(*d)).collect();
    let positive_score = teacher.score(query, &[positive])?[0];
    let threshold = positive_score * cfg.percentage_margin;
    let scores = teacher.score(query, &candidates)?;
    let mut eligible: Vec<usize> = (0..candidates.len()).filter(|&i| scores[i] < threshold).collect();
    eligible.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    eligible.truncate(cfg.top_k);
    Ok(Mined {
        short: eligible.len() < cfg.top_k,
        negatives: eligible.iter().map(|&i| candidates[i].to_string()).collect(),
        scores: eligible.iter().map(|&i| scores[i]).collect(),
        positive_score,
        threshold,
    })
}

/// Mines negatives for every example in parallel, replacing its list.
/// Returns how many examples came up short.
pub fn mine_dataset(
    examples: &mut [TrainingExample],
    corpus: &[String],
    teacher: &dyn Teacher,
    cfg: &MiningConfig,
) -> Result<usize> {
    let mined: Vec<Mined> = examples
        .par_iter()
        .map(|ex| mine_hard_negatives(&ex.query_text()?, &ex.positive, corpus, teacher, cfg))
        .collect::<Result<_>>()?;
    let mut short = 0;
    for (ex, m) in examples.iter_mut().zip(mined) {
        short += m.short as usize;
        ex.negatives = m.negatives;
    }
    Ok(short)
}

// ---- pair construction ----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Positive is the label text itself.
    LabelBased,
    /// Positive is another example of the same class.
    ExampleBased,
}

#[derive(Clone, Debug)]
pub struct PairBuild {
    pub examples: Vec<TrainingExample>,
    /// Queries dropped because their class had no other member.
    pub skipped: usize,
}

pub fn build_multiclass_pairs(
    data: &[LabeledExample],
    mode: PairMode,
    task_definition: &str,
    max_negatives: usize,
    seed: u64,
) -> Result<PairBuild> {
    let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in data.iter().enumerate() {
        classes.entry(ex.label.as_str()).or_default().push(i);
    }
    if classes.len() < 2 {
        return Err(Error::Input(format!("need at least 2 classes, found {}", classes.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(data.len());
    let mut skipped = 0;
    for (i, ex) in data.iter().enumerate() {
        let (positive, negatives) = match mode {
            PairMode::LabelBased => {
                let others: Vec<String> =
                    classes.keys().filter(|&&l| l != ex.label).take(max_negatives).map(|l| l.to_string()).collect();
                (ex.label.clone(), others)
            }
            PairMode::ExampleBased => {
                let mates: Vec<usize> = classes[ex.label.as_str()].iter().copied().filter(|&j| j != i).collect();
                if mates.is_empty() {
                    skipped += 1;
                    continue;
                }
                let positive = data[mates[rng.random_range(0..mates.len())]].text.clone();
                let pool: Vec<usize> = (0..data.len()).filter(|&j| data[j].label != ex.label).collect();
                let n = max_negatives.min(pool.len());
                let mut negatives: Vec<String> =
                    sample(&mut rng, pool.len(), n).into_iter().map(|k| data[pool[k]].text.clone()).collect();
                negatives.retain(|t| t != &positive);
                (positive, negatives)
            }
        };
        let mut te = TrainingExample::new(task_definition, &ex.text, &positive, negatives);
        te.label = Some(ex.label.clone());
        out.push(te);
    }
    Ok(PairBuild { examples: out, skipped })
}

/// Two symmetric examples when `score ≥ 4`, none otherwise. Negatives are
/// mined from `pool` minus the pair itself.
pub fn build_sts_pairs(
    t_a: &str,
    t_b: &str,
    score: f64,
    task_definition: &str,
    pool: &[String],
    teacher: &dyn Teacher,
    cfg: &MiningConfig,
) -> Result<Vec<TrainingExample>> {
    if score < STS_MIN_SCORE {
        return Ok(Vec::new());
    }
    let others: Vec<String> = pool.iter().filter(|t| *t != t_a && *t != t_b).cloned().collect();
    let mut out = Vec::with_capacity(2);
    for (q, d) in [(t_a, t_b), (t_b, t_a)] {
        let mut ex = TrainingExample::new(task_definition, q, d, Vec::new());
        ex.symmetric = true;
        ex.pair_score = Some(score);
        if !others.is_empty() {
            ex.negatives = mine_hard_negatives(&ex.query_text()?, d, &others, teacher, cfg)?.negatives;
        }
        out.push(ex);
    }
    Ok(out)
}

// ---- datasets -------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<TrainingExample>,
}

impl Dataset {
    pub fn new(name: &str, mut examples: Vec<TrainingExample>) -> Self {
        examples.iter_mut().for_each(|e| e.source_dataset = name.to_string());
        Self { name: name.into(), examples }
    }

    /// One JSON object per line; the dataset is named after the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut examples = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut ex: TrainingExample = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            ex.symmetric |= ex.pair_score.is_some();
            if ex.negatives.contains(&ex.positive) {
                return Err(Error::Validation(format!(
                    "{}:{}: positive appears among the negatives",
                    path.display(),
                    n + 1
                )));
            }
            examples.push(ex);
        }
        if examples.is_empty() {
            return Err(Error::Validation(format!("{}: no examples", path.display())));
        }
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self::new(&name, examples))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_examples(path, &self.examples)
    }
}

pub fn write_examples(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    let mut out = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut out, ex).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Endless seeded sampler: a dataset uniformly at random, then an example
/// uniformly within it.
#[derive(Clone, Debug)]
pub struct BlendedStream {
    datasets: Vec<Dataset>,
    rng: ChaCha8Rng,
}

impl BlendedStream {
    pub fn new(datasets: Vec<Dataset>, seed: u64) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Config("no datasets to blend".into()));
        }
        if let Some(d) = datasets.iter().find(|d| d.examples.is_empty()) {
            return Err(Error::Validation(format!("dataset {} is empty", d.name)));
        }
        Ok(Self { datasets, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }

    /// Next (dataset, example) index pair.
    pub fn next_index(&mut self) -> (usize, usize) {
        let d = self.rng.random_range(0..self.datasets.len());
        let e = self.rng.random_range(0..self.datasets[d].examples.len());
        (d, e)
    }

    pub fn next_example(&mut self) -> &TrainingExample {
        let (d, e) = self.next_index();
        &self.datasets[d].examples[e]
    }
}

pub fn load_blended(paths: &[PathBuf], seed: u64) -> Result<BlendedStream> {
    let datasets = paths.iter().map(|p| Dataset::load(p)).collect::<Result<Vec<_>>>()?;
    BlendedStream::new(datasets, seed)
}

#[cfg(test)]
mod tests;
