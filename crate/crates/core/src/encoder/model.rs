//! Pre-norm transformer blocks over byte tokens with learned absolute
//! position embeddings.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::encoder::config::EncoderConfig;
use crate::encoder::mask::attention_allow;
use crate::encoder::tokenizer::TokenSequence;
use crate::error::{Error, Result};
use crate::layers::{Binder, Linear};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LayerVars<T> {
    pub ln1: (Var, Var),
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ln2: (Var, Var),
    pub up: Linear<T>,
    pub down: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderVars<T> {
    pub tokens: Var,
    pub positions: Var,
    pub layers: Vec<LayerVars<T>>,
}

impl<T: Scalar> EncoderVars<T> {
    pub fn bind(g: &mut Graph<T>, binder: &mut Binder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        let tokens = binder.get(g, "embed.tokens")?;
        let positions = binder.get(g, "embed.positions")?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("layers.{l}");
            layers.push(LayerVars {
                ln1: (binder.get(g, &format!("{p}.ln1.gain"))?, binder.get(g, &format!("{p}.ln1.bias"))?),
                q: Linear::bind(g, binder, &format!("{p}.attn.q"), true)?,
                k: Linear::bind(g, binder, &format!("{p}.attn.k"), true)?,
                v: Linear::bind(g, binder, &format!("{p}.attn.v"), true)?,
                o: Linear::bind(g, binder, &format!("{p}.attn.o"), true)?,
                ln2: (binder.get(g, &format!("{p}.ln2.gain"))?, binder.get(g, &format!("{p}.ln2.bias"))?),
                up: Linear::bind(g, binder, &format!("{p}.ffn.up"), true)?,
                down: Linear::bind(g, binder, &format!("{p}.ffn.down"), true)?,
            });
        }
        Ok(Self { tokens, positions, layers })
    }
}

/// Hidden states after every block; the last one is the encoder output.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub layer_states: Vec<Var>,
}

pub fn encode_on<T: Scalar>(
    g: &mut Graph<T>,
    vars: &EncoderVars<T>,
    cfg: &EncoderConfig,
    seq: &TokenSequence,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<EncoderOutput> {
    let l = seq.len();
    if l > cfg.max_len || seq.valid_len > l || seq.valid_len == 0 {
        return Err(Error::Input(format!(
            "sequence of {l} tokens ({} valid) for max_len {}",
            seq.valid_len, cfg.max_len
        )));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let tok = g.gather(vars.tokens, &seq.ids)?;
    let positions: Vec<usize> = (0..l).collect();
    let pos = g.gather(vars.positions, &positions)?;
    let mut x = g.add(tok, pos)?;

    let allow = attention_allow(l, seq.valid_len, cfg.mask_mode);
    let eps = T::lit(cfg.layer_norm_eps);
    let head_dim = cfg.head_dim();
    let scale = T::one() / T::lit(head_dim as f64).sqrt();
    let mut layer_states = Vec::with_capacity(vars.layers.len());
    for layer in &vars.layers {
        let h = g.layer_norm(x, layer.ln1.0, layer.ln1.1, eps)?;
        let q = layer.q.forward(g, h, rng.as_deref_mut())?;
        let k = layer.k.forward(g, h, rng.as_deref_mut())?;
        let v = layer.v.forward(g, h, rng.as_deref_mut())?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let (qh, kh, vh) = if cfg.n_heads == 1 {
                (q, k, v)
            } else {
                let s = hd * head_dim;
                (g.slice_cols(q, s, head_dim)?, g.slice_cols(k, s, head_dim)?, g.slice_cols(v, s, head_dim)?)
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let w = g.softmax_rows(scores, Some(&allow))?;
            heads.push(g.matmul(w, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let attn = layer.o.forward(g, joined, rng.as_deref_mut())?;
        x = g.add(x, attn)?;

        let h = g.layer_norm(x, layer.ln2.0, layer.ln2.1, eps)?;
        let f = layer.up.forward(g, h, rng.as_deref_mut())?;
        let f = g.gelu(f)?;
        let f = layer.down.forward(g, f, rng.as_deref_mut())?;
        x = g.add(x, f)?;
        layer_states.push(x);
    }
    Ok(EncoderOutput { hidden: x, layer_states })
}

/// Last-layer hidden states `l×d` of `seq` under `ckpt`.
pub fn encode<T: Scalar>(seq: &TokenSequence, ckpt: &Checkpoint<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let frozen = |_: &str| false;
    let mut binder = Binder::new(ckpt, &frozen);
    let vars = EncoderVars::bind(&mut g, &mut binder, &ckpt.config.encoder)?;
    let out = encode_on(&mut g, &vars, &ckpt.config.encoder, seq, None)?;
    Ok(g.value(out.hidden).clone())
}
