//! Encoder and pooling head wired together: text in, unit embedding out.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Checkpoint, ModelConfig};
use crate::encoder::model::{encode_on, EncoderVars};
use crate::encoder::tokenizer::{tokenize, TokenSequence};
use crate::error::Result;
use crate::layers::Binder;
use crate::pooling::{pool, PoolVars};
use crate::scalar::Scalar;

/// All checkpoint tensors bound on one graph.
#[derive(Clone, Debug)]
pub struct ModelVars<T> {
    pub encoder: EncoderVars<T>,
    pub pool: PoolVars<T>,
    /// Every bound tensor by name.
    pub params: BTreeMap<String, Var>,
}

impl<T: Scalar> ModelVars<T> {
    /// Binds the checkpoint; tensors for which `trainable` holds become
    /// gradient-carrying leaves, the rest constants.
    pub fn bind(g: &mut Graph<T>, ckpt: &Checkpoint<T>, trainable: &dyn Fn(&str) -> bool) -> Result<Self> {
        let mut binder = Binder::new(ckpt, trainable);
        let encoder = EncoderVars::bind(g, &mut binder, &ckpt.config.encoder)?;
        let pool = PoolVars::bind(g, &mut binder, &ckpt.config.pooling)?;
        Ok(Self { encoder, pool, params: binder.into_bound() })
    }

    /// Like [`bind`](Self::bind) but reuses vars already on the graph.
    pub fn bind_existing(g: &mut Graph<T>, ckpt: &Checkpoint<T>, existing: &BTreeMap<String, Var>) -> Result<Self> {
        let mut binder = Binder::with_bound(ckpt, existing.clone());
        let encoder = EncoderVars::bind(g, &mut binder, &ckpt.config.encoder)?;
        let pool = PoolVars::bind(g, &mut binder, &ckpt.config.pooling)?;
        Ok(Self { encoder, pool, params: binder.into_bound() })
    }
}

#[derive(Clone, Debug)]
pub struct Embedded {
    /// Unit-norm `1×d` embedding.
    pub embedding: Var,
    /// Pooled `1×d` vector before normalization.
    pub pooled: Var,
    /// Hidden state after every encoder block.
    pub layer_states: Vec<Var>,
    /// Per-position output of the pooling block, for attention heads.
    pub pool_block: Option<Var>,
}

impl Embedded {
    /// Intermediate states in depth order, ending with the pooled output.
    pub fn states(&self) -> Vec<Var> {
        let mut s = self.layer_states.clone();
        s.extend(self.pool_block);
        s.push(self.pooled);
        s
    }
}

pub fn embed_on<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars<T>,
    config: &ModelConfig,
    seq: &TokenSequence,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Embedded> {
    let enc = encode_on(g, &vars.encoder, &config.encoder, seq, rng.as_deref_mut())?;
    let pooled = pool(g, &vars.pool, &config.pooling, enc.hidden, seq, rng)?;
    let embedding = g.normalize_rows(pooled.embedding)?;
    Ok(Embedded {
        embedding,
        pooled: pooled.embedding,
        layer_states: enc.layer_states,
        pool_block: pooled.block,
    })
}

/// Inference helper that binds the weights once and reuses the graph for
/// every text.
pub struct Embedder<'a, T> {
    ckpt: &'a Checkpoint<T>,
    graph: Graph<T>,
    vars: ModelVars<T>,
    base: usize,
}

impl<'a, T: Scalar> Embedder<'a, T> {
    pub fn new(ckpt: &'a Checkpoint<T>) -> Result<Self> {
        let mut graph = Graph::new();
        let vars = ModelVars::bind(&mut graph, ckpt, &|_| false)?;
        let base = graph.len();
        Ok(Self { ckpt, graph, vars, base })
    }

    pub fn embed_sequence(&mut self, seq: &TokenSequence) -> Result<Vec<T>> {
        let out = embed_on(&mut self.graph, &self.vars, &self.ckpt.config, seq, None);
        let v = out.map(|e| self.graph.value(e.embedding).data().to_vec());
        self.graph.truncate(self.base);
        v
    }

    /// Unit embedding of `text` exactly as given (no instruction added).
    pub fn embed_text(&mut self, text: &str) -> Result<Vec<T>> {
        let seq = tokenize(text, self.ckpt.config.encoder.max_len)?;
        self.embed_sequence(&seq)
    }
}
