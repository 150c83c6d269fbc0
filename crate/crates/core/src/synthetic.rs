//! Seeded toy tasks small enough to train on in seconds, plus the
//! pooling × mask ablation sweep over them.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, ModelConfig};
use crate::curation::{Dataset, LabeledExample, TrainingExample};
use crate::encoder::MaskMode;
use crate::error::Result;
use crate::eval::{run_retrieval_eval, Qrel, RetrievalSet};
use crate::pooling::PoolingKind;
use crate::trainer::{StageConfig, StageExtras, StageRunner};

pub const RETRIEVAL_TASK: &str = "match code";
pub const CLASSIFICATION_TASK: &str = "classify";

const KEY_LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
const FILLER: &[u8] = b"0123456789";

fn word(rng: &mut ChaCha8Rng, alphabet: &[u8], len: usize) -> String {
    (0..len).map(|_| *alphabet.choose(rng).expect("non-empty alphabet") as char).collect()
}

/// Query/positive pairs sharing a three-letter key; positives also carry
/// digit filler, and negatives are other examples' positives.
#[derive(Clone, Debug)]
pub struct ToyRetrieval {
    pub train: Dataset,
    pub eval: RetrievalSet,
}

pub fn toy_retrieval(n: usize, negatives: usize, seed: u64) -> ToyRetrieval {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut keys = Vec::with_capacity(n);
    while keys.len() < n {
        let k = word(&mut rng, KEY_LETTERS, 3);
        let mut letters: Vec<u8> = k.bytes().collect();
        letters.sort_unstable();
        letters.dedup();
        // distinct letter sets keep pairs separable by content alone
        if letters.len() == 3 && seen.insert(letters) {
            keys.push(k);
        }
    }
    let docs: Vec<String> = keys
        .iter()
        .map(|k| {
            let (a, b) = (rng.random_range(2..5), rng.random_range(2..5));
            format!("{} {k} {}", word(&mut rng, FILLER, a), word(&mut rng, FILLER, b))
        })
        .collect();
    let examples = (0..n)
        .map(|i| {
            let negs = (0..negatives.min(n.saturating_sub(1)))
                .map(|_| loop {
                    let j = rng.random_range(0..n);
                    if j != i {
                        break docs[j].clone();
                    }
                })
                .collect();
            TrainingExample::new(RETRIEVAL_TASK, &keys[i], &docs[i], negs)
        })
        .collect();
    ToyRetrieval {
        train: Dataset::new("toy_retrieval", examples),
        eval: RetrievalSet {
            queries: keys.iter().enumerate().map(|(i, k)| (format!("q{i}"), k.clone())).collect(),
            corpus: docs.iter().enumerate().map(|(i, d)| (format!("d{i}"), d.clone())).collect(),
            qrels: (0..n).map(|i| Qrel { query: format!("q{i}"), doc: format!("d{i}"), grade: 1 }).collect(),
        },
    }
}

/// Class names deliberately share no letters with the class signatures.
const CLASS_NAMES: [&str; 4] = ["WX", "YZ", "QV", "JK"];

/// Texts of three short words. Each class owns a disjoint signature
/// alphabet; every character is drawn from it with probability `signal`,
/// otherwise from a noise alphabet shared by all classes.
pub fn toy_classification(
    classes: usize,
    per_class: usize,
    signal: f64,
    seed: u64,
) -> Vec<LabeledExample> {
    assert!((2..=CLASS_NAMES.len()).contains(&classes), "2 to {} classes", CLASS_NAMES.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signatures: Vec<&[u8]> = (0..classes).map(|c| &KEY_LETTERS[c * 4..c * 4 + 4]).collect();
    let noise = &KEY_LETTERS[16..];
    let mut out = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (c, sig) in signatures.iter().enumerate() {
            let words: Vec<String> = (0..3)
                .map(|_| {
                    (0..rng.random_range(3..6))
                        .map(|_| {
                            let alphabet = if rng.random_bool(signal) { *sig } else { noise };
                            *alphabet.choose(&mut rng).expect("non-empty alphabet") as char
                        })
                        .collect()
                })
                .collect();
            out.push(LabeledExample { text: words.join(" "), label: CLASS_NAMES[c].to_string() });
        }
    }
    out.shuffle(&mut rng);
    out
}

// ---- ablation sweep ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub pooling: PoolingKind,
    pub mask: MaskMode,
    pub final_loss: f64,
    pub ndcg: f64,
    pub recall_at_1: f64,
}

/// Every pooling kind under both attention masks, in a fixed order.
pub fn ablation_grid() -> Vec<(PoolingKind, MaskMode)> {
    PoolingKind::ALL
        .into_iter()
        .flat_map(|p| [MaskMode::Bidirectional, MaskMode::Causal].map(|m| (p, m)))
        .collect()
}

/// Trains one fresh model per grid cell with identical data and budget,
/// then evaluates retrieval. Rows follow [`ablation_grid`] order.
pub fn ablation_sweep(
    base: &ModelConfig,
    stage: &StageConfig,
    task: &ToyRetrieval,
    init_seed: u64,
) -> Result<Vec<SweepRow>> {
    ablation_grid()
        .into_par_iter()
        .map(|(pooling, mask)| {
            let mut config = base.clone();
            config.pooling.kind = pooling;
            config.encoder.mask_mode = mask;
            let ckpt = Checkpoint::init(config, init_seed)?;
            let out = StageRunner::with_datasets(stage.clone(), ckpt, vec![task.train.clone()], StageExtras::default())?
                .run()?;
            let tail = stage.steps.saturating_sub(stage.steps / 10).min(stage.steps.saturating_sub(1));
            let report = run_retrieval_eval(&task.eval, &out.ckpt, RETRIEVAL_TASK, 10)?;
            Ok(SweepRow {
                pooling,
                mask,
                final_loss: out.trace.mean_loss(tail..stage.steps),
                ndcg: report.metrics["ndcg@10"],
                recall_at_1: report.metrics["recall@1"],
            })
        })
        .collect()
}

/// Fixed-width comparison table, one row per cell.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!("{:<17} {:<14} {:>10} {:>9} {:>9}\n", "pooling", "mask", "final_loss", "ndcg@10", "recall@1");
    for r in rows {
        writeln!(
            out,
            "{:<17} {:<14} {:>10.4} {:>9.4} {:>9.4}",
            r.pooling.as_str(),
            r.mask.to_string(),
            r.final_loss,
            r.ndcg,
            r.recall_at_1
        )
        .expect("string write");
    }
    out
}
