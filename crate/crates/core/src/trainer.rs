//! Contrastive training: InfoNCE with optional in-batch negatives, Adam
//! with decoupled weight decay under a warmup/linear-decay schedule, and the
//! two-stage driver.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Checkpoint, ModelConfig};
use crate::compress::{default_kd_mapping, kd_loss, PruneMask};
use crate::curation::{BlendedStream, Dataset, TrainingExample};
use crate::encoder::tokenize;
use crate::error::{Error, Result};
use crate::model::{embed_on, Embedded, ModelVars};
use crate::tensor::Tensor;

// ---- loss -----------------------------------------------------------------

/// Which documents beyond a query's own positive and hard negatives enter
/// its softmax.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    /// Other queries' positives.
    pub in_batch: bool,
    /// Other queries' hard negatives as well (only with `in_batch`).
    pub cross_batch_negatives: bool,
}

impl LossConfig {
    pub fn new(temperature: f64, in_batch: bool) -> Self {
        Self { temperature, in_batch, cross_batch_negatives: false }
    }
}

/// Candidate mask for a `B × (B + M)` logit matrix whose columns are the
/// `B` positives followed by the stacked hard negatives.
pub fn candidate_mask(neg_counts: &[usize], cfg: &LossConfig) -> Vec<bool> {
    let b = neg_counts.len();
    let m: usize = neg_counts.iter().sum();
    let n = b + m;
    let mut allow = vec![false; b * n];
    let mut offset = b;
    for (i, &k) in neg_counts.iter().enumerate() {
        let row = &mut allow[i * n..(i + 1) * n];
        row[i] = true;
        if cfg.in_batch {
            row[..b].iter_mut().for_each(|a| *a = true);
            if cfg.cross_batch_negatives {
                row[b..].iter_mut().for_each(|a| *a = true);
            }
        }
        row[offset..offset + k].iter_mut().for_each(|a| *a = true);
        offset += k;
    }
    allow
}

/// Graph pieces of a contrastive loss, kept for per-row diagnostics.
#[derive(Clone, Debug)]
pub struct ContrastiveTerms {
    pub loss: Var,
    pub logits: Var,
    pub allow: Vec<bool>,
}

impl ContrastiveTerms {
    /// `-log p(positive)` for each query.
    pub fn row_losses(&self, g: &Graph<f64>) -> Vec<f64> {
        let logits = g.value(self.logits);
        let n = logits.cols();
        (0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let allowed = (0..n).filter(|&j| self.allow[i * n + j]);
                let max = allowed.clone().map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + allowed.map(|j| (row[j] - max).exp()).sum::<f64>().ln();
                lse - row[i]
            })
            .collect()
    }
}

/// Mean over queries of `-log softmax(q·[P; N]ᵀ / τ)` at the own positive.
/// `negatives` stacks each query's hard negatives in order; `neg_counts`
/// says how many belong to each.
pub fn contrastive_loss_on(
    g: &mut Graph<f64>,
    q: Var,
    p: Var,
    negatives: Option<Var>,
    neg_counts: &[usize],
    cfg: &LossConfig,
) -> Result<ContrastiveTerms> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config(format!("temperature {} must be positive", cfg.temperature)));
    }
    let b = g.value(q).rows();
    if g.value(p).shape() != g.value(q).shape() || neg_counts.len() != b {
        return Err(Error::Dimension(format!(
            "queries {:?}, positives {:?}, {} negative counts",
            g.value(q).shape(),
            g.value(p).shape(),
            neg_counts.len()
        )));
    }
    let m: usize = neg_counts.iter().sum();
    let docs = match negatives {
        Some(n) if m > 0 => {
            if g.value(n).rows() != m {
                return Err(Error::Dimension(format!("{} negative rows for counts summing to {m}", g.value(n).rows())));
            }
            g.concat_rows(&[p, n])?
        }
        None if m == 0 => p,
        _ => return Err(Error::Dimension(format!("negative rows do not match counts summing to {m}"))),
    };
    let sims = g.matmul_nt(q, docs)?;
    let logits = g.scale(sims, 1.0 / cfg.temperature)?;
    let allow = candidate_mask(neg_counts, cfg);
    let targets: Vec<usize> = (0..b).collect();
    let loss = g.cross_entropy(logits, &targets, Some(&allow))?;
    Ok(ContrastiveTerms { loss, logits, allow })
}

/// Unit-norm embeddings of one batch.
#[derive(Clone, Debug)]
pub struct BatchEmbeddings {
    pub queries: Tensor<f64>,
    pub positives: Tensor<f64>,
    /// Hard negatives of every query, stacked in query order.
    pub negatives: Option<Tensor<f64>>,
    pub neg_counts: Vec<usize>,
}

impl BatchEmbeddings {
    /// Uniform `k` negatives per query, given as `B·k` stacked rows.
    pub fn new(queries: Tensor<f64>, positives: Tensor<f64>, negatives: Option<Tensor<f64>>, k: usize) -> Result<Self> {
        let b = queries.rows();
        let be = Self { queries, positives, negatives, neg_counts: vec![k; b] };
        be.validate()?;
        Ok(be)
    }

    pub fn validate(&self) -> Result<()> {
        let mut all = vec![&self.queries, &self.positives];
        all.extend(self.negatives.as_ref());
        for t in all {
            for i in 0..t.rows() {
                let norm = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(Error::Contract(format!("embedding row {i} has norm {norm}")));
                }
            }
        }
        Ok(())
    }
}

pub fn contrastive_loss(be: &BatchEmbeddings, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let q = g.constant(be.queries.clone());
    let p = g.constant(be.positives.clone());
    let n = be.negatives.clone().map(|t| g.constant(t));
    let terms = contrastive_loss_on(&mut g, q, p, n, &be.neg_counts, cfg)?;
    g.value(terms.loss).item()
}

// ---- optimizer ------------------------------------------------------------

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(Vec::as_slice)
    }

    /// Applies one update to each `(name, weights, grad)`.
    pub fn step<'a>(&mut self, lr: f64, params: impl IntoIterator<Item = (&'a str, &'a mut [f64], &'a [f64])>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, w, grad) in params {
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; w.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; w.len()]);
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps) + self.weight_decay * w[i];
                w[i] -= lr * update;
            }
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then linear decay to zero
/// at `steps`.
pub fn learning_rate(step: usize, steps: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else {
        peak * (steps - step) as f64 / (steps - warmup) as f64
    }
}

// ---- stages ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: u8,
    pub in_batch_negatives: bool,
    pub cross_batch_negatives: bool,
    pub datasets: Vec<PathBuf>,
    pub steps: usize,
    pub warmup_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_hard_negatives: usize,
    pub temperature: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            in_batch_negatives: true,
            cross_batch_negatives: false,
            datasets: Vec::new(),
            steps: 200,
            warmup_steps: 20,
            learning_rate: 2e-3,
            batch_size: 16,
            n_hard_negatives: 7,
            temperature: 0.05,
            weight_decay: 0.03,
            seed: 0,
        }
    }

    pub fn stage2() -> Self {
        Self { stage: 2, in_batch_negatives: false, learning_rate: 1.5e-3, ..Self::stage1() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("stage {}: {m}", self.stage)));
        if self.stage != 1 && self.stage != 2 {
            return fail("stage must be 1 or 2".into());
        }
        if self.warmup_steps > self.steps {
            return fail(format!("warmup {} exceeds steps {}", self.warmup_steps, self.steps));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("learning rate and weight decay must be non-negative".into());
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            in_batch: self.in_batch_negatives,
            cross_batch_negatives: self.cross_batch_negatives,
        }
    }
}

/// Distill toward a fixed teacher while training.
#[derive(Clone, Debug)]
pub struct Distillation {
    pub teacher: Checkpoint<f64>,
    pub alpha: f64,
    /// (student state, teacher state) pairs; default when `None`.
    pub mapping: Option<Vec<(usize, usize)>>,
}

#[derive(Clone, Debug, Default)]
pub struct StageExtras {
    pub distill: Option<Distillation>,
    /// Pruned weights are pinned at zero after every update.
    pub prune: Option<PruneMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub contrastive: f64,
    pub kd: Option<f64>,
    pub lr: f64,
    /// Per dataset: (sum of per-query losses, query count).
    pub by_source: BTreeMap<String, (f64, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub steps: Vec<StepRecord>,
}

impl LossTrace {
    /// `step,loss` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in &self.steps {
            writeln!(out, "{},{}", r.step, r.loss).expect("string write");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Mean total loss over the steps in `range`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.steps[range];
        s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64
    }

    /// Mean per-query loss of one dataset over the steps in `range`.
    pub fn source_loss(&self, source: &str, range: std::ops::Range<usize>) -> Option<f64> {
        let (sum, n) = self.steps[range]
            .iter()
            .filter_map(|r| r.by_source.get(source))
            .fold((0.0, 0), |(s, n), (a, b)| (s + a, n + b));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Contrastive loss of one batch on `g`, with the per-text embeddings.
pub struct BatchGraph {
    pub terms: ContrastiveTerms,
    pub cache: HashMap<String, Embedded>,
    /// Distinct texts in first-seen order.
    pub order: Vec<String>,
}

/// Embeds every query, positive and the first `n_hard` negatives of each
/// example. Identical strings share one node so duplicates are exact.
pub fn batch_graph(
    g: &mut Graph<f64>,
    vars: &ModelVars<f64>,
    config: &ModelConfig,
    batch: &[TrainingExample],
    n_hard: usize,
    loss: &LossConfig,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<BatchGraph> {
    let mut cache: HashMap<String, Embedded> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut embed = |g: &mut Graph<f64>, text: String| -> Result<Var> {
        if let Some(e) = cache.get(&text) {
            return Ok(e.embedding);
        }
        let seq = tokenize(&text, config.encoder.max_len)?;
        let e = embed_on(g, vars, config, &seq, dropout.as_deref_mut())?;
        let v = e.embedding;
        order.push(text.clone());
        cache.insert(text, e);
        Ok(v)
    };
    let (mut qs, mut ps, mut ns, mut counts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ex in batch {
        qs.push(embed(g, ex.query_text()?)?);
        ps.push(embed(g, ex.document_text(&ex.positive)?)?);
        let negs: Vec<&String> = ex.negatives.iter().take(n_hard).collect();
        counts.push(negs.len());
        for n in negs {
            ns.push(embed(g, ex.document_text(n)?)?);
        }
    }
    let q = g.concat_rows(&qs)?;
    let p = g.concat_rows(&ps)?;
    let n = if ns.is_empty() { None } else { Some(g.concat_rows(&ns)?) };
    let terms = contrastive_loss_on(g, q, p, n, &counts, loss)?;
    Ok(BatchGraph { terms, cache, order })
}

/// Step-by-step driver for one stage. The optimizer starts fresh.
pub struct StageRunner {
    cfg: StageConfig,
    ckpt: Checkpoint<f64>,
    stream: BlendedStream,
    adam: Adam,
    trainable: BTreeSet<String>,
    extras: StageExtras,
    teacher_graph: Option<(Graph<f64>, ModelVars<f64>, usize)>,
    dropout: ChaCha8Rng,
    step: usize,
    trace: LossTrace,
}

fn is_adapter(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

impl StageRunner {
    pub fn new(cfg: StageConfig, ckpt: Checkpoint<f64>, extras: StageExtras) -> Result<Self> {
        let datasets = cfg.datasets.iter().map(|p| Dataset::load(p)).collect::<Result<Vec<_>>>()?;
        Self::with_datasets(cfg, ckpt, datasets, extras)
    }

    pub fn with_datasets(
        cfg: StageConfig,
        ckpt: Checkpoint<f64>,
        datasets: Vec<Dataset>,
        extras: StageExtras,
    ) -> Result<Self> {
        cfg.validate()?;
        ckpt.validate()?;
        let stream = BlendedStream::new(datasets, cfg.seed)?;
        // with adapters attached only they train
        let lora = !ckpt.config.lora.is_empty();
        let trainable = ckpt.names().filter(|n| !lora || is_adapter(n)).map(String::from).collect();
        let teacher_graph = match &extras.distill {
            Some(d) => {
                if !(d.alpha >= 0.0) {
                    return Err(Error::Config(format!("kd weight {} must be non-negative", d.alpha)));
                }
                let mut g = Graph::new();
                let vars = ModelVars::bind(&mut g, &d.teacher, &|_| false)?;
                let base = g.len();
                Some((g, vars, base))
            }
            None => None,
        };
        Ok(Self {
            adam: Adam::new(cfg.weight_decay),
            dropout: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c6f_7261),
            cfg,
            ckpt,
            stream,
            trainable,
            extras,
            teacher_graph,
            step: 0,
            trace: LossTrace::default(),
        })
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn checkpoint(&self) -> &Checkpoint<f64> {
        &self.ckpt
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    fn teacher_states(&mut self, text: &str) -> Result<Vec<Tensor<f64>>> {
        let d = self.extras.distill.as_ref().expect("distillation configured");
        let (g, vars, base) = self.teacher_graph.as_mut().expect("teacher bound");
        let seq = tokenize(text, d.teacher.config.encoder.max_len)?;
        let states = embed_on(g, vars, &d.teacher.config, &seq, None)
            .map(|e| e.states().into_iter().map(|v| g.value(v).clone()).collect());
        g.truncate(*base);
        states
    }

    /// One optimizer update. Non-finite values anywhere in the forward pass
    /// abort with [`Error::Diverged`].
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        self.try_step().map_err(|e| match e {
            Error::Numeric(_) => Error::Diverged { step },
            e => e,
        })
    }

    fn try_step(&mut self) -> Result<StepRecord> {
        let batch: Vec<TrainingExample> = (0..self.cfg.batch_size).map(|_| self.stream.next_example().clone()).collect();
        let mut g = Graph::new();
        let trainable = &self.trainable;
        let vars = ModelVars::bind(&mut g, &self.ckpt, &|n| trainable.contains(n))?;
        let use_dropout = self.ckpt.config.lora.iter().any(|s| s.dropout > 0.0);
        let BatchGraph { terms, cache, order } = batch_graph(
            &mut g,
            &vars,
            &self.ckpt.config,
            &batch,
            self.cfg.n_hard_negatives,
            &self.cfg.loss(),
            use_dropout.then_some(&mut self.dropout),
        )?;
        let contrastive = g.value(terms.loss).item()?;

        let mut loss = terms.loss;
        let mut kd_value = None;
        if self.extras.distill.is_some() {
            let mut kd_terms = Vec::with_capacity(order.len());
            for text in &order {
                let teacher: Vec<Var> = self.teacher_states(text)?.into_iter().map(|t| g.constant(t)).collect();
                let student = cache[text].states();
                let d = self.extras.distill.as_ref().expect("checked");
                let mapping = match &d.mapping {
                    Some(m) => m.clone(),
                    None => default_kd_mapping(student.len(), teacher.len())?,
                };
                kd_terms.push(kd_loss(&mut g, &student, &teacher, &mapping)?);
            }
            let mut kd = kd_terms[0];
            for &t in &kd_terms[1..] {
                kd = g.add(kd, t)?;
            }
            let kd = g.scale(kd, 1.0 / kd_terms.len() as f64)?;
            kd_value = Some(g.value(kd).item()?);
            let weighted = g.scale(kd, self.extras.distill.as_ref().expect("checked").alpha)?;
            loss = g.add(loss, weighted)?;
        }
        let total = g.value(loss).item()?;
        if !total.is_finite() {
            return Err(Error::Diverged { step: self.step });
        }

        let mut by_source: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (ex, l) in batch.iter().zip(terms.row_losses(&g)) {
            let e = by_source.entry(ex.source_dataset.clone()).or_default();
            e.0 += l;
            e.1 += 1;
        }

        g.backward(loss)?;
        let lr = learning_rate(self.step, self.cfg.steps, self.cfg.warmup_steps, self.cfg.learning_rate);
        let grads: Vec<(String, Vec<f64>)> = self
            .trainable
            .iter()
            .map(|name| {
                let len = self.ckpt.get(name).map(|t| t.len()).unwrap_or(0);
                let grad = vars.params.get(name).and_then(|&v| g.grad(v)).map(<[f64]>::to_vec);
                (name.clone(), grad.unwrap_or_else(|| vec![0.0; len]))
            })
            .collect();
        let mut weights: Vec<(String, Tensor<f64>)> =
            grads.iter().map(|(n, _)| (n.clone(), self.ckpt.get(n).expect("trainable").clone())).collect();
        self.adam.step(
            lr,
            weights.iter_mut().zip(&grads).map(|((n, w), (_, gr))| (n.as_str(), w.data_mut(), gr.as_slice())),
        );
        for (name, w) in weights {
            *self.ckpt.get_mut(&name)? = w;
        }
        if let Some(mask) = &self.extras.prune {
            mask.apply(&mut self.ckpt)?;
        }

        let record = StepRecord { step: self.step, loss: total, contrastive, kd: kd_value, lr, by_source };
        self.trace.steps.push(record.clone());
        self.step += 1;
        Ok(record)
    }

    pub fn run(mut self) -> Result<StageOutput> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> StageOutput {
        StageOutput { ckpt: self.ckpt, trace: self.trace }
    }
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub ckpt: Checkpoint<f64>,
    pub trace: LossTrace,
}

pub fn train_stage(cfg: &StageConfig, ckpt: &Checkpoint<f64>) -> Result<StageOutput> {
    StageRunner::new(cfg.clone(), ckpt.clone(), StageExtras::default())?.run()
}

#[derive(Clone, Debug)]
pub struct TwoStageOutput {
    pub ckpt: Checkpoint<f64>,
    pub first: LossTrace,
    pub second: LossTrace,
}

/// Runs `cfg1` and then `cfg2` on its result, each with a fresh optimizer.
pub fn two_stage_train(cfg1: &StageConfig, cfg2: &StageConfig, ckpt: &Checkpoint<f64>) -> Result<TwoStageOutput> {
    if cfg1.stage != 1 || cfg2.stage != 2 {
        return Err(Error::Config(format!("expected stages 1 then 2, got {} then {}", cfg1.stage, cfg2.stage)));
    }
    let first = train_stage(cfg1, ckpt)?;
    let second = train_stage(cfg2, &first.ckpt)?;
    Ok(TwoStageOutput { ckpt: second.ckpt, first: first.trace, second: second.trace })
}
