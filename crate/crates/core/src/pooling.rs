//! Pooling heads mapping encoder states `H ∈ ℝ^{l×d}` to one embedding.
//!
//! Four heads are provided: the EOS state, the masked mean, a self-attention
//! block followed by an MLP, and the latent-attention layer. The latter lets
//! every pooled position query a trainable latent dictionary that serves as
//! both keys and values:
//!
//! ```text
//! O   = softmax(Q·Kᵀ)·V        Q = H·W_qᵀ, K = L·W_kᵀ, V = L·W_vᵀ (per head)
//! out = mean_rows(O + MLP(O))  MLP = W_2·GELU(W_1·o + b_1) + b_2
//! ```

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::tokenizer::TokenSequence;
use crate::error::{Error, Result};
use crate::layers::{Binder, Linear};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Eos,
    Mean,
    SelfAttention,
    LatentAttention,
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 4] =
        [PoolingKind::Eos, PoolingKind::Mean, PoolingKind::SelfAttention, PoolingKind::LatentAttention];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolingKind::Eos => "eos",
            PoolingKind::Mean => "mean",
            PoolingKind::SelfAttention => "self_attention",
            PoolingKind::LatentAttention => "latent_attention",
        }
    }
}

impl std::str::FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolingKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pooling {s:?}")))
    }
}

impl std::fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolingConfig {
    pub kind: PoolingKind,
    /// Number of latents `r` in the dictionary.
    pub latents: usize,
    pub n_heads: usize,
    /// Hidden width of the post-attention MLP; `4·d` when unset.
    pub mlp_hidden: Option<usize>,
    /// Wrap the MLP in a residual connection.
    pub residual: bool,
    /// Use unscaled `softmax(QKᵀ)` instead of dividing scores by `√d_head`.
    pub unscaled_scores: bool,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            kind: PoolingKind::LatentAttention,
            latents: 64,
            n_heads: 4,
            mlp_hidden: None,
            residual: true,
            unscaled_scores: false,
        }
    }
}

impl PoolingConfig {
    pub fn mlp_width(&self, d_model: usize) -> usize {
        self.mlp_hidden.unwrap_or(4 * d_model)
    }

    pub fn has_attention(&self) -> bool {
        matches!(self.kind, PoolingKind::SelfAttention | PoolingKind::LatentAttention)
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if !self.has_attention() {
            return Ok(());
        }
        if self.n_heads == 0 || !d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "pooling heads {} must divide width {d_model}",
                self.n_heads
            )));
        }
        if self.kind == PoolingKind::LatentAttention && self.latents == 0 {
            return Err(Error::Config("latent dictionary needs at least one latent".into()));
        }
        if self.mlp_width(d_model) == 0 {
            return Err(Error::Config("pooling MLP width must be positive".into()));
        }
        Ok(())
    }
}

/// Positions that take part in pooling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolMask {
    allow: Vec<bool>,
}

impl PoolMask {
    pub fn new(allow: Vec<bool>) -> Result<Self> {
        if !allow.iter().any(|&a| a) {
            return Err(Error::Contract("pool mask selects no position".into()));
        }
        Ok(Self { allow })
    }

    /// Excludes BOS, instruction tokens and padding; EOS stays in.
    pub fn for_sequence(seq: &TokenSequence) -> Self {
        let start = seq.instruction_end.max(1).min(seq.valid_len - 1);
        let allow = (0..seq.len()).map(|i| i >= start && i < seq.valid_len).collect();
        Self { allow }
    }

    pub fn allows(&self, pos: usize) -> bool {
        self.allow[pos]
    }

    pub fn positions(&self) -> Vec<usize> {
        self.allow.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
    }

    pub fn len(&self) -> usize {
        self.allow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allow.is_empty()
    }
}

/// Multi-head attention projections plus the two-layer MLP that follows.
#[derive(Clone, Debug)]
pub struct AttentionBlock<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub up: Linear<T>,
    pub down: Linear<T>,
}

impl<T: Scalar> AttentionBlock<T> {
    fn bind(g: &mut Graph<T>, binder: &mut Binder<'_, T>) -> Result<Self> {
        Ok(Self {
            q: Linear::bind(g, binder, "pool.attn.q", false)?,
            k: Linear::bind(g, binder, "pool.attn.k", false)?,
            v: Linear::bind(g, binder, "pool.attn.v", false)?,
            o: Linear::bind(g, binder, "pool.attn.o", false)?,
            up: Linear::bind(g, binder, "pool.mlp.up", true)?,
            down: Linear::bind(g, binder, "pool.mlp.down", true)?,
        })
    }
}

/// Trainable latent array (keys and values at once) with its block.
#[derive(Clone, Debug)]
pub struct LatentDictionary<T> {
    pub latents: Var,
    pub block: AttentionBlock<T>,
}

#[derive(Clone, Debug)]
pub enum PoolVars<T> {
    Eos,
    Mean,
    SelfAttention(AttentionBlock<T>),
    LatentAttention(LatentDictionary<T>),
}

impl<T: Scalar> PoolVars<T> {
    pub fn bind(g: &mut Graph<T>, binder: &mut Binder<'_, T>, cfg: &PoolingConfig) -> Result<Self> {
        Ok(match cfg.kind {
            PoolingKind::Eos => PoolVars::Eos,
            PoolingKind::Mean => PoolVars::Mean,
            PoolingKind::SelfAttention => PoolVars::SelfAttention(AttentionBlock::bind(g, binder)?),
            PoolingKind::LatentAttention => PoolVars::LatentAttention(LatentDictionary {
                latents: binder.get(g, "pool.latents")?,
                block: AttentionBlock::bind(g, binder)?,
            }),
        })
    }
}

/// Pooled embedding (`1×d`, not normalized) and, for attention heads, the
/// per-position block output it was averaged from.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub embedding: Var,
    pub block: Option<Var>,
}

pub fn pool<T: Scalar>(
    g: &mut Graph<T>,
    vars: &PoolVars<T>,
    cfg: &PoolingConfig,
    h: Var,
    seq: &TokenSequence,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Pooled> {
    let mask = PoolMask::for_sequence(seq);
    match vars {
        PoolVars::Eos => Ok(Pooled { embedding: pool_eos(g, h, seq)?, block: None }),
        PoolVars::Mean => Ok(Pooled { embedding: pool_mean(g, h, &mask)?, block: None }),
        PoolVars::SelfAttention(block) => {
            let rows = g.select_rows(h, &mask.positions())?;
            let out = attention_block(g, block, cfg, rows, rows, rng.as_deref_mut())?;
            Ok(Pooled { embedding: g.mean_rows(out)?, block: Some(out) })
        }
        PoolVars::LatentAttention(dict) => {
            check_width(g, h, dict.latents)?;
            let rows = g.select_rows(h, &mask.positions())?;
            let out = attention_block(g, &dict.block, cfg, rows, dict.latents, rng)?;
            Ok(Pooled { embedding: g.mean_rows(out)?, block: Some(out) })
        }
    }
}

/// The hidden state at the EOS position.
pub fn pool_eos<T: Scalar>(g: &mut Graph<T>, h: Var, seq: &TokenSequence) -> Result<Var> {
    g.select_rows(h, &[seq.eos_index()])
}

/// Mean of the masked-in rows.
pub fn pool_mean<T: Scalar>(g: &mut Graph<T>, h: Var, mask: &PoolMask) -> Result<Var> {
    let positions = mask.positions();
    if positions.is_empty() {
        return Err(Error::Contract("mean pooling over an empty mask".into()));
    }
    let rows = g.select_rows(h, &positions)?;
    g.mean_rows(rows)
}

/// Masked-in rows of `h` attend to the latent dictionary; the result goes
/// through the MLP and is averaged.
pub fn pool_latent_attention<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    dict: &LatentDictionary<T>,
    cfg: &PoolingConfig,
    mask: &PoolMask,
) -> Result<Var> {
    check_width(g, h, dict.latents)?;
    let rows = g.select_rows(h, &mask.positions())?;
    let out = attention_block(g, &dict.block, cfg, rows, dict.latents, None)?;
    g.mean_rows(out)
}

/// Self-attention among the masked-in rows, then MLP and mean.
pub fn pool_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    block: &AttentionBlock<T>,
    cfg: &PoolingConfig,
    mask: &PoolMask,
) -> Result<Var> {
    let rows = g.select_rows(h, &mask.positions())?;
    let out = attention_block(g, block, cfg, rows, rows, None)?;
    g.mean_rows(out)
}

/// Scales every row of `e` to unit length.
pub fn normalize<T: Scalar>(g: &mut Graph<T>, e: Var) -> Result<Var> {
    g.normalize_rows(e)
}

fn check_width<T: Scalar>(g: &Graph<T>, h: Var, latents: Var) -> Result<()> {
    let (dh, dl) = (g.value(h).cols(), g.value(latents).cols());
    if dh != dl {
        return Err(Error::Config(format!("hidden width {dh} does not match latent width {dl}")));
    }
    Ok(())
}

/// `O + MLP(O)` (or `MLP(O)` without residual) where `O` is multi-head
/// attention of `queries` over `keys_values`.
fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    block: &AttentionBlock<T>,
    cfg: &PoolingConfig,
    queries: Var,
    keys_values: Var,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let q = block.q.forward(g, queries, rng.as_deref_mut())?;
    let k = block.k.forward(g, keys_values, rng.as_deref_mut())?;
    let v = block.v.forward(g, keys_values, rng.as_deref_mut())?;
    let d = g.value(q).cols();
    let head_dim = d / cfg.n_heads;
    let scale = if cfg.unscaled_scores { T::one() } else { T::one() / T::lit(head_dim as f64).sqrt() };
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for hd in 0..cfg.n_heads {
        let (qh, kh, vh) = if cfg.n_heads == 1 {
            (q, k, v)
        } else {
            let start = hd * head_dim;
            (
                g.slice_cols(q, start, head_dim)?,
                g.slice_cols(k, start, head_dim)?,
                g.slice_cols(v, start, head_dim)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = if scale == T::one() { scores } else { g.scale(scores, scale)? };
        let weights = g.softmax_rows(scores, None)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let o = block.o.forward(g, joined, rng.as_deref_mut())?;
    let hidden = block.up.forward(g, o, rng.as_deref_mut())?;
    let hidden = g.gelu(hidden)?;
    let mlp = block.down.forward(g, hidden, rng)?;
    if cfg.residual {
        g.add(o, mlp)
    } else {
        Ok(mlp)
    }
}

#[cfg(test)]
mod tests;
