//! Low-rank adapters on linear layers: `W·x + (alpha/rank)·B·A·x`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{Checkpoint, LoraSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    /// Linear layer name, e.g. `layers.0.attn.q`.
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    /// Probability in `[0, 1)`; applied to the adapter input during training.
    pub dropout: f64,
    /// `rank×in`
    pub a: Tensor<T>,
    /// `out×rank`
    pub b: Tensor<T>,
}

impl<T: Scalar> LoraAdapter<T> {
    /// Random `A`, zero `B`: the adapted layer starts equal to the base.
    pub fn init(
        ckpt: &Checkpoint<T>,
        target: &str,
        rank: usize,
        alpha: f64,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        let (out_dim, in_dim) = layer_dims(ckpt, target)?;
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, (in_dim as f64).sqrt().recip()).expect("std");
        let a = (0..rank * in_dim).map(|_| T::lit(dist.sample(&mut rng))).collect();
        Ok(Self {
            target: target.to_string(),
            rank,
            alpha,
            dropout,
            a: Tensor::new([rank, in_dim], a)?,
            b: Tensor::zeros([out_dim, rank]),
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Dense `(alpha/rank)·B·A`, shaped like the target weight.
    pub fn delta(&self) -> Tensor<T> {
        let (out_dim, in_dim) = (self.b.shape()[0], self.a.shape()[1]);
        let s = T::lit(self.scale());
        let mut d = vec![T::zero(); out_dim * in_dim];
        for o in 0..out_dim {
            for r in 0..self.rank {
                let bv = self.b.at(o, r) * s;
                for i in 0..in_dim {
                    d[o * in_dim + i] += bv * self.a.at(r, i);
                }
            }
        }
        Tensor::new([out_dim, in_dim], d).expect("delta shape")
    }
}

fn layer_dims<T: Scalar>(ckpt: &Checkpoint<T>, target: &str) -> Result<(usize, usize)> {
    ckpt.config
        .linear_layers()
        .into_iter()
        .find(|(n, ..)| n == target)
        .map(|(_, o, i)| (o, i))
        .ok_or_else(|| Error::Config(format!("unknown LoRA target {target:?}")))
}

/// Attaches adapters to a checkpoint, replacing any already on the same
/// layer.
pub fn apply_lora<T: Scalar>(ckpt: &Checkpoint<T>, adapters: Vec<LoraAdapter<T>>) -> Result<Checkpoint<T>> {
    let mut out = ckpt.clone();
    for ad in adapters {
        let (out_dim, in_dim) = layer_dims(ckpt, &ad.target)?;
        if ad.rank == 0 || ad.a.shape() != [ad.rank, in_dim] || ad.b.shape() != [out_dim, ad.rank] {
            return Err(Error::Config(format!(
                "adapter for {} has A {:?} and B {:?}; layer is {out_dim}×{in_dim} at rank {}",
                ad.target,
                ad.a.shape(),
                ad.b.shape(),
                ad.rank
            )));
        }
        if !(0.0..1.0).contains(&ad.dropout) {
            return Err(Error::Config(format!("LoRA dropout {} outside [0, 1)", ad.dropout)));
        }
        out.config.lora.retain(|s| s.target != ad.target);
        out.config.lora.push(LoraSpec {
            target: ad.target.clone(),
            rank: ad.rank,
            alpha: ad.alpha,
            dropout: ad.dropout,
        });
        out.insert(format!("{}.lora_a", ad.target), ad.a);
        out.insert(format!("{}.lora_b", ad.target), ad.b);
    }
    out.validate()?;
    Ok(out)
}

/// Reads back the adapters stored in a checkpoint.
pub fn adapters<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<LoraAdapter<T>>> {
    ckpt.config
        .lora
        .iter()
        .map(|s| {
            Ok(LoraAdapter {
                target: s.target.clone(),
                rank: s.rank,
                alpha: s.alpha,
                dropout: s.dropout,
                a: ckpt.get(&format!("{}.lora_a", s.target))?.clone(),
                b: ckpt.get(&format!("{}.lora_b", s.target))?.clone(),
            })
        })
        .collect()
}

/// Folds every adapter into its base weight and removes it.
pub fn merge_lora<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Checkpoint<T>> {
    let mut tensors = ckpt.tensors().clone();
    for ad in adapters(ckpt)? {
        let delta = ad.delta();
        let w = tensors
            .get_mut(&format!("{}.weight", ad.target))
            .ok_or_else(|| Error::Config(format!("no base weight for {}", ad.target)))?;
        w.data_mut().iter_mut().zip(delta.data()).for_each(|(w, &d)| *w += d);
        tensors.remove(&format!("{}.lora_a", ad.target));
        tensors.remove(&format!("{}.lora_b", ad.target));
    }
    let mut config = ckpt.config.clone();
    config.lora.clear();
    Checkpoint::from_parts(config, tensors)
}
