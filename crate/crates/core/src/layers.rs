//! Parameter binding and the linear layer shared by the encoder and the
//! pooling heads.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Puts checkpoint tensors on a graph on demand, each at most once.
pub struct Binder<'a, T> {
    ckpt: &'a Checkpoint<T>,
    trainable: &'a dyn Fn(&str) -> bool,
    bound: BTreeMap<String, Var>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(ckpt: &'a Checkpoint<T>, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self { ckpt, trainable, bound: BTreeMap::new() }
    }

    /// Starts from vars the caller already created; names missing from
    /// `bound` are bound as constants.
    pub fn with_bound(ckpt: &'a Checkpoint<T>, bound: BTreeMap<String, Var>) -> Self {
        Self { ckpt, trainable: &|_| false, bound }
    }

    pub fn checkpoint(&self) -> &'a Checkpoint<T> {
        self.ckpt
    }

    pub fn get(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.ckpt.get(name)?.clone();
        let v = if (self.trainable)(name) { g.param(t) } else { g.constant(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn into_bound(self) -> BTreeMap<String, Var> {
        self.bound
    }
}

/// Low-rank adapter attached to a linear layer.
#[derive(Clone, Debug)]
pub struct LoraVars<T> {
    pub a: Var,
    pub b: Var,
    pub scale: T,
    pub dropout: f64,
}

/// `y = x·Wᵀ + b`, plus `scale·(dropout(x)·Aᵀ)·Bᵀ` when an adapter is bound.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Var,
    pub bias: Option<Var>,
    pub lora: Option<LoraVars<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Binds `{prefix}.weight` (and `{prefix}.bias` if `with_bias`), plus the
    /// adapter registered for `prefix` in the checkpoint, if any.
    pub fn bind(g: &mut Graph<T>, binder: &mut Binder<'_, T>, prefix: &str, with_bias: bool) -> Result<Self> {
        let weight = binder.get(g, &format!("{prefix}.weight"))?;
        let bias = if with_bias { Some(binder.get(g, &format!("{prefix}.bias"))?) } else { None };
        let lora = match binder.checkpoint().config.lora.iter().find(|s| s.target == prefix) {
            Some(spec) => Some(LoraVars {
                a: binder.get(g, &format!("{prefix}.lora_a"))?,
                b: binder.get(g, &format!("{prefix}.lora_b"))?,
                scale: T::lit(spec.alpha / spec.rank as f64),
                dropout: spec.dropout,
            }),
            None => None,
        };
        Ok(Self { weight, bias, lora })
    }

    /// With `rng` set (training), adapter dropout is active.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let mut y = g.matmul_nt(x, self.weight)?;
        if let Some(b) = self.bias {
            y = g.add_row(y, b)?;
        }
        if let Some(lora) = &self.lora {
            let input = match rng {
                Some(rng) if lora.dropout > 0.0 => {
                    let mask = dropout_mask(g.value(x).shape(), lora.dropout, rng);
                    let m = g.constant(mask);
                    g.mul(x, m)?
                }
                _ => x,
            };
            let low = g.matmul_nt(input, lora.a)?;
            let up = g.matmul_nt(low, lora.b)?;
            let up = g.scale(up, lora.scale)?;
            y = g.add(y, up)?;
        }
        Ok(y)
    }
}

/// Inverted dropout mask: kept entries are `1/(1-p)`.
fn dropout_mask<T: Scalar>(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
    Tensor::new(shape.to_vec(), data).expect("mask shape")
}
