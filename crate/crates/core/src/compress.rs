//! Post-training compression: magnitude pruning (unstructured and N:M),
//! layer-state distillation, and simulated INT8/FP8 weight quantization.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{is_linear_weight, Checkpoint};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Only linear-layer weights are pruned or quantized; embeddings, norms,
/// the latent dictionary and adapters are left alone.
pub fn is_compressible(name: &str) -> bool {
    is_linear_weight(name)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PrunePattern {
    /// Drop a fraction `p` of each tensor.
    Unstructured(f64),
    /// Keep `n` of every aligned group of `m` along the input dimension.
    NOfM { n: usize, m: usize },
}

impl PrunePattern {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Unstructured(p) if !(0.0..=1.0).contains(&p) => {
                Err(Error::Config(format!("pruning fraction {p} outside [0, 1]")))
            }
            Self::NOfM { n, m } if m == 0 || n > m => Err(Error::Config(format!("invalid pattern {n}:{m}"))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PrunePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Unstructured(p) => write!(f, "unstructured:{p}"),
            Self::NOfM { n, m } => write!(f, "{n}:{m}"),
        }
    }
}

impl FromStr for PrunePattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown pruning pattern {s:?}"));
        let pattern = if let Some(p) = s.strip_prefix("unstructured:") {
            Self::Unstructured(p.parse().map_err(|_| bad())?)
        } else {
            let (n, m) = s.split_once(':').ok_or_else(bad)?;
            Self::NOfM { n: n.parse().map_err(|_| bad())?, m: m.parse().map_err(|_| bad())? }
        };
        pattern.validate()?;
        Ok(pattern)
    }
}

/// Per-tensor keep flags; `true` means the weight survives.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    pub pattern: PrunePattern,
    pub masks: BTreeMap<String, Vec<bool>>,
}

impl PruneMask {
    pub fn kept_fraction(&self, name: &str) -> Option<f64> {
        let m = self.masks.get(name)?;
        Some(m.iter().filter(|&&k| k).count() as f64 / m.len() as f64)
    }

    /// Zeroes every pruned weight.
    pub fn apply<T: Scalar>(&self, ckpt: &mut Checkpoint<T>) -> Result<()> {
        for (name, mask) in &self.masks {
            let t = ckpt.get_mut(name)?;
            if t.len() != mask.len() {
                return Err(Error::Dimension(format!("mask for {name} has {} entries, tensor {}", mask.len(), t.len())));
            }
            for (w, &keep) in t.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *w = T::zero();
                }
            }
        }
        Ok(())
    }
}

/// Flags the `keep` largest magnitudes, earlier index first on ties.
fn keep_largest<T: Scalar>(values: &[T], keep: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().as_f64().total_cmp(&values[a].abs().as_f64()).then(a.cmp(&b)));
    let mut flags = vec![false; values.len()];
    order.into_iter().take(keep).for_each(|i| flags[i] = true);
    flags
}

pub fn prune_tensor<T: Scalar>(name: &str, t: &Tensor<T>, pattern: PrunePattern) -> Result<Vec<bool>> {
    match pattern {
        PrunePattern::Unstructured(p) => {
            let keep = ((1.0 - p) * t.len() as f64).round() as usize;
            Ok(keep_largest(t.data(), keep))
        }
        PrunePattern::NOfM { n, m } => {
            let cols = t.shape().last().copied().unwrap_or(1);
            if cols % m != 0 {
                return Err(Error::Config(format!("{name}: input dimension {cols} not divisible by {m}")));
            }
            Ok(t.data().chunks(m).flat_map(|group| keep_largest(group, n)).collect())
        }
    }
}

pub fn magnitude_prune<T: Scalar>(ckpt: &Checkpoint<T>, pattern: PrunePattern) -> Result<(Checkpoint<T>, PruneMask)> {
    pattern.validate()?;
    let mut masks = BTreeMap::new();
    for (name, t) in ckpt.tensors().iter().filter(|(n, _)| is_compressible(n)) {
        masks.insert(name.clone(), prune_tensor(name, t, pattern)?);
    }
    let mask = PruneMask { pattern, masks };
    let mut out = ckpt.clone();
    mask.apply(&mut out)?;
    Ok((out, mask))
}

// ---- distillation ---------------------------------------------------------

/// Pairs student state `i` with teacher state `i` for all but the last
/// student state, which is paired with the teacher's last.
pub fn default_kd_mapping(n_student: usize, n_teacher: usize) -> Result<Vec<(usize, usize)>> {
    if n_student == 0 || n_teacher == 0 || n_student > n_teacher {
        return Err(Error::Config(format!("no default mapping from {n_student} student to {n_teacher} teacher states")));
    }
    let mut pairs: Vec<(usize, usize)> = (0..n_student - 1).map(|i| (i, i)).collect();
    pairs.push((n_student - 1, n_teacher - 1));
    Ok(pairs)
}

fn check_pair(s: &[usize], t: &[usize], pair: (usize, usize)) -> Result<()> {
    if s != t {
        return Err(Error::Contract(format!(
            "kd pair (student {}, teacher {}) has shapes {s:?} vs {t:?}",
            pair.0, pair.1
        )));
    }
    Ok(())
}

fn lookup<X>(states: &[X], i: usize, who: &str) -> Result<X>
where
    X: Clone,
{
    states.get(i).cloned().ok_or_else(|| Error::Contract(format!("{who} state {i} out of range ({})", states.len())))
}

/// Sum over mapped pairs of the mean squared difference.
pub fn kd_loss<T: Scalar>(g: &mut Graph<T>, student: &[Var], teacher: &[Var], mapping: &[(usize, usize)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &pair in mapping {
        let (s, t) = (lookup(student, pair.0, "student")?, lookup(teacher, pair.1, "teacher")?);
        check_pair(g.value(s).shape(), g.value(t).shape(), pair)?;
        let d = g.sub(s, t)?;
        let sq = g.mul(d, d)?;
        let mse = g.mean(sq)?;
        total = Some(match total {
            Some(acc) => g.add(acc, mse)?,
            None => mse,
        });
    }
    Ok(match total {
        Some(v) => v,
        None => g.constant(Tensor::scalar(T::zero())),
    })
}

/// [`kd_loss`] on plain tensors.
pub fn kd_loss_values(student: &[Tensor<f64>], teacher: &[Tensor<f64>], mapping: &[(usize, usize)]) -> Result<f64> {
    let mut total = 0.0;
    for &pair in mapping {
        let (s, t) = (lookup(student, pair.0, "student")?, lookup(teacher, pair.1, "teacher")?);
        check_pair(s.shape(), t.shape(), pair)?;
        total += s.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s.len() as f64;
    }
    Ok(total)
}

pub fn kd_total_loss(contrastive: f64, kd: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("kd weight {alpha} must be non-negative")));
    }
    Ok(contrastive + alpha * kd)
}

// ---- quantization ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantFormat {
    Int8PerRowAbsmax,
    Fp8E4M3,
    Fp8E5M2,
}

/// Sign, exponent and mantissa layout of an 8-bit float.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fp8Format {
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    pub bias: i32,
    pub max_finite: f64,
}

/// No infinities; only S.1111.111 is NaN, so the top binade is usable.
pub const E4M3: Fp8Format = Fp8Format { exponent_bits: 4, mantissa_bits: 3, bias: 7, max_finite: 448.0 };
/// IEEE-style: the all-ones exponent holds inf and NaN.
pub const E5M2: Fp8Format = Fp8Format { exponent_bits: 5, mantissa_bits: 2, bias: 15, max_finite: 57344.0 };

impl QuantFormat {
    pub fn fp8(self) -> Option<Fp8Format> {
        match self {
            Self::Int8PerRowAbsmax => None,
            Self::Fp8E4M3 => Some(E4M3),
            Self::Fp8E5M2 => Some(E5M2),
        }
    }
}

impl fmt::Display for QuantFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Int8PerRowAbsmax => "int8",
            Self::Fp8E4M3 => "fp8e4m3",
            Self::Fp8E5M2 => "fp8e5m2",
        })
    }
}

impl FromStr for QuantFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "int8" => Ok(Self::Int8PerRowAbsmax),
            "fp8e4m3" => Ok(Self::Fp8E4M3),
            "fp8e5m2" => Ok(Self::Fp8E5M2),
            _ => Err(Error::Config(format!("unknown quantization format {s:?}"))),
        }
    }
}

/// Nearest representable value, ties to even mantissa, subnormals kept,
/// saturating at the largest finite value.
pub fn round_fp8(x: f64, fmt: Fp8Format) -> f64 {
    if x == 0.0 || x.is_nan() {
        return x;
    }
    let a = x.abs();
    if a >= fmt.max_finite {
        return fmt.max_finite.copysign(x);
    }
    let min_exp = 1 - fmt.bias;
    let exp = (libm::frexp(a).1 - 1).max(min_exp);
    let quantum = 2f64.powi(exp - fmt.mantissa_bits as i32);
    let q = ((a / quantum).round_ties_even() * quantum).min(fmt.max_finite);
    q.copysign(x)
}

/// Integer codes of one row under symmetric absmax scaling, plus the
/// dequantized values.
pub fn quantize_int8_row(row: &[f64]) -> (Vec<i8>, Vec<f64>) {
    let absmax = row.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if absmax == 0.0 {
        return (vec![0; row.len()], vec![0.0; row.len()]);
    }
    let codes: Vec<i8> = row.iter().map(|w| (w * 127.0 / absmax).round_ties_even().clamp(-127.0, 127.0) as i8).collect();
    let values = codes.iter().map(|&q| q as f64 * absmax / 127.0).collect();
    (codes, values)
}

pub fn quantize_tensor<T: Scalar>(t: &Tensor<T>, fmt: QuantFormat) -> Tensor<T> {
    match fmt.fp8() {
        Some(spec) => t.map(|w| T::lit(round_fp8(w.as_f64(), spec))),
        None => {
            let cols = t.shape().last().copied().unwrap_or(1);
            let data: Vec<T> = t
                .to_f64_vec()
                .chunks(cols)
                .flat_map(|row| quantize_int8_row(row).1)
                .map(T::lit)
                .collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        }
    }
}

pub fn quantize_weights<T: Scalar>(ckpt: &Checkpoint<T>, fmt: QuantFormat) -> Checkpoint<T> {
    let mut out = ckpt.clone();
    let names: Vec<String> = ckpt.names().filter(|n| is_compressible(n)).map(String::from).collect();
    for name in names {
        let q = quantize_tensor(ckpt.get(&name).expect("listed"), fmt);
        *out.get_mut(&name).expect("listed") = q;
    }
    out
}

// ---- report ---------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct CompressionReport {
    pub pattern: Option<PrunePattern>,
    pub format: Option<QuantFormat>,
    /// Kept fraction per pruned tensor.
    pub kept: BTreeMap<String, f64>,
    pub before: BTreeMap<String, f64>,
    pub after: BTreeMap<String, f64>,
}

impl CompressionReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let none = "none".to_string();
        out += &format!("prune={}\n", self.pattern.map(|p| p.to_string()).unwrap_or(none.clone()));
        out += &format!("quant={}\n", self.format.map(|f| f.to_string()).unwrap_or(none));
        for (name, k) in &self.kept {
            out += &format!("kept.{name}={k}\n");
        }
        for (metric, b) in &self.before {
            out += &format!("before.{metric}={b}\n");
            if let Some(a) = self.after.get(metric) {
                out += &format!("after.{metric}={a}\n");
                out += &format!("delta.{metric}={}\n", a - b);
            }
        }
        out
    }
}
