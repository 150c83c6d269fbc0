//! Named-tensor model container and its binary file format.
//!
//! File layout (all integers little-endian `u32`):
//!
//! ```text
//! "EMBK" | version | config_len | config JSON | tensor_count
//! per tensor: name_len | name | rank | dims[rank] | f32 payload
//! ```
//!
//! Tensors are written in name order, so equal checkpoints produce equal
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::pooling::{PoolingConfig, PoolingKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EMBK";
pub const FORMAT_VERSION: u32 = 1;

/// Low-rank adapter metadata; the matrices live in the tensor map as
/// `{target}.lora_a` (`rank×in`) and `{target}.lora_b` (`out×rank`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSpec {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pooling: PoolingConfig,
    #[serde(default)]
    pub lora: Vec<LoraSpec>,
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pooling.validate(self.encoder.d_model)
    }

    /// Names of every linear layer, e.g. `layers.0.attn.q`.
    pub fn linear_layers(&self) -> Vec<(String, usize, usize)> {
        let e = &self.encoder;
        let (d, ff) = (e.d_model, e.d_ff);
        let mut out = Vec::new();
        for l in 0..e.n_layers {
            for p in ["q", "k", "v", "o"] {
                out.push((format!("layers.{l}.attn.{p}"), d, d));
            }
            out.push((format!("layers.{l}.ffn.up"), ff, d));
            out.push((format!("layers.{l}.ffn.down"), d, ff));
        }
        if self.pooling.has_attention() {
            let h = self.pooling.mlp_width(d);
            for p in ["q", "k", "v", "o"] {
                out.push((format!("pool.attn.{p}"), d, d));
            }
            out.push(("pool.mlp.up".into(), h, d));
            out.push(("pool.mlp.down".into(), d, h));
        }
        out
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let e = &self.encoder;
        let d = e.d_model;
        let mut out = vec![
            ("embed.tokens".to_string(), vec![e.vocab_size, d], Init::Normal(1.0)),
            ("embed.positions".to_string(), vec![e.max_len, d], Init::Normal(0.2)),
        ];
        for l in 0..e.n_layers {
            for ln in ["ln1", "ln2"] {
                out.push((format!("layers.{l}.{ln}.gain"), vec![d], Init::Ones));
                out.push((format!("layers.{l}.{ln}.bias"), vec![d], Init::Zeros));
            }
        }
        if self.pooling.kind == PoolingKind::LatentAttention {
            out.push(("pool.latents".into(), vec![self.pooling.latents, d], Init::Normal(1.0)));
        }
        for (name, rows, cols) in self.linear_layers() {
            let fan_in = cols as f64;
            out.push((format!("{name}.weight"), vec![rows, cols], Init::Normal(fan_in.sqrt().recip())));
            if !name.starts_with("pool.attn.") {
                out.push((format!("{name}.bias"), vec![rows], Init::Zeros));
            }
        }
        for spec in &self.lora {
            if let Some((_, rows, cols)) = self.linear_layers().into_iter().find(|(n, ..)| *n == spec.target) {
                out.push((format!("{}.lora_a", spec.target), vec![spec.rank, cols], Init::Normal((cols as f64).sqrt().recip())));
                out.push((format!("{}.lora_b", spec.target), vec![rows, spec.rank], Init::Zeros));
            }
        }
        out
    }

    /// Every tensor a checkpoint with this config must hold.
    pub fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.layout().into_iter().map(|(n, s, _)| (n, s)).collect()
    }
}

/// True for weights of linear layers (not embeddings, norms, biases, the
/// latent dictionary, or adapters).
pub fn is_linear_weight(name: &str) -> bool {
    name.ends_with(".weight")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Freshly initialized weights, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in config.layout() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect()
                }
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, tensors })
    }

    /// Assembles a checkpoint from parts, checking every expected tensor is
    /// present with the right shape and nothing else is.
    pub fn from_parts(config: ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let ckpt = Self { config, tensors };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.config.expected_shapes();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(Error::Format(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Format(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::Config(format!("no tensor named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Config(format!("no tensor named {name}")))
    }

    pub(crate) fn insert(&mut self, name: String, t: Tensor<T>) {
        self.tensors.insert(name, t);
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        Checkpoint {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Rounds every value to the nearest `f32`, the precision checkpoints are
    /// stored at.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = T::lit(v.as_f64() as f32 as f64);
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
        let mut out = Vec::with_capacity(16 + config.len() + self.param_count() * 4);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, config.len() as u32);
        out.extend_from_slice(&config);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an embedkit checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let clen = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(clen)?)
            .map_err(|e| Error::Format(format!("config: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            tensors.insert(name, Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after tensors".into()));
        }
        Self::from_parts(config, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
