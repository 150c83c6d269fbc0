//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape: every operation evaluates eagerly,
//! stores its output, and records how to push gradients back to its inputs.
//! Nodes are created in topological order, so [`Graph::backward`] walks the
//! tape once in reverse.

pub mod kernels;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use kernels::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, normal_cdf, normal_pdf};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation kinds, used to name operations in diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    MatMulNt,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Softmax,
    Gelu,
    LayerNorm,
    Gather,
    SelectRows,
    SliceCols,
    ConcatCols,
    ConcatRows,
    MeanRows,
    Sum,
    Mean,
    NormalizeRows,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::MatMulNt,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::Softmax,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::Gather,
        OpKind::SelectRows,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::MeanRows,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::NormalizeRows,
        OpKind::CrossEntropy,
    ];
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for OpKind {
    type Err = crate::error::Error;

    /// Case-insensitive variant name, e.g. `layernorm` or `LayerNorm`.
    fn from_str(s: &str) -> crate::error::Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| crate::error::Error::Config(format!("unknown op {s:?}")))
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    NormalizeRows { x: Var, norms: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Gelu(..) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gather { .. } => OpKind::Gather,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    // Accumulated gradients of `requires_grad` leaves.
    grads: Vec<Option<Vec<T>>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(Error::Dimension(format!("{what} expects a matrix, got shape {:?}", t.shape()))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), fault: None }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    /// Makes the backward rule of `kind` deliberately wrong (gradients are
    /// doubled). Only used to prove that gradient checks catch faults.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        self.grad(v).map(|g| Tensor::new(shape, g.to_vec()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- operations -------------------------------------------------------

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul of [{m}, {k}] by [{k2}, {n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::new([m, n], out)?;
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Product with a transposed right operand, `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul_nt")?;
        let (n, k2) = matrix_dims(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul of [{m}, {k}] by transposed [{n}, {k2}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::new([m, n], out)?;
        Ok(self.derived(value, Op::MatMulNt(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.derived(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(bias).len() != n || self.value(bias).rank() != 1 {
            return Err(Error::Dimension(format!(
                "row broadcast of {:?} onto {:?}",
                self.value(bias).shape(),
                self.value(a).shape()
            )));
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(x, &y)| *x += y);
        }
        Ok(self.derived(value, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        Ok(self.derived(value, Op::Scale(a, c), &[a]))
    }

    /// Row-wise softmax. Where `allow` is given, disallowed entries get
    /// probability exactly zero; each row needs at least one allowed entry.
    pub fn softmax_rows(&mut self, x: Var, allow: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims(t, "softmax_rows")?;
        if let Some(mask) = allow {
            if mask.len() != m * n {
                return Err(Error::Dimension(format!(
                    "softmax mask of length {} for [{m}, {n}]",
                    mask.len()
                )));
            }
        }
        let probs = masked_softmax(t.data(), m, n, allow)?;
        let value = Tensor::new([m, n], probs)?;
        Ok(self.derived(value, Op::Softmax(x), &[x]))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * normal_cdf(v));
        Ok(self.derived(value, Op::Gelu(x), &[x]))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let d = self.value(x).cols();
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.value(p).shape() != [d] {
                return Err(Error::Dimension(format!(
                    "layer_norm {name} {:?} for width {d}",
                    self.value(p).shape()
                )));
            }
        }
        let t = self.value(x);
        let rows = t.rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); t.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let s = T::one() / (var + eps).sqrt();
            inv_std[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.derived(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Row lookup: row `i` of the output is row `ids[i]` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = matrix_dims(t, "gather")?;
        if ids.is_empty() {
            return Err(Error::Input("gather with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("id {id} outside table of {v} rows")));
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new([ids.len(), d], out)?;
        Ok(self.derived(value, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Picks rows of a matrix (repetition allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, _) = matrix_dims(t, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Dimension(format!("row {bad} of a {m}-row matrix")));
        }
        if rows.is_empty() {
            return Err(Error::Contract("select_rows needs at least one row".into()));
        }
        let mut out = Vec::with_capacity(rows.len() * t.cols());
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let value = Tensor::new([rows.len(), t.cols()], out)?;
        Ok(self.derived(value, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims(t, "slice_cols")?;
        if width == 0 || start + width > n {
            return Err(Error::Dimension(format!("columns {start}..{} of [{m}, {n}]", start + width)));
        }
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&t.row(r)[start..start + width]);
        }
        let value = Tensor::new([m, width], out)?;
        Ok(self.derived(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (m, _) = matrix_dims(self.value(*first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = matrix_dims(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(Error::Dimension(format!("concat_cols of {m} and {pm} rows")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new([m, n], out)?;
        Ok(self.derived(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks matrices (or vectors, as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let n = self.value(*first).cols();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n || t.rank() > 2 {
                return Err(Error::Dimension(format!(
                    "concat_rows of {:?} onto width {n}",
                    t.shape()
                )));
            }
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new([out.len() / n, n], out)?;
        Ok(self.derived(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Column means of a matrix, as a `1×n` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims(t, "mean_rows")?;
        let mut out = vec![T::zero(); n];
        for r in 0..m {
            out.iter_mut().zip(t.row(r)).for_each(|(o, &v)| *o += v);
        }
        let mn = T::from_usize(m).unwrap();
        out.iter_mut().for_each(|o| *o /= mn);
        let value = Tensor::new([1, n], out)?;
        Ok(self.derived(value, Op::MeanRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        Ok(self.derived(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.len()).unwrap();
        Ok(self.derived(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let norm = dot(row, row).sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::Numeric(format!("cannot normalize a row of norm {norm}")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.derived(value, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i]`, restricted to
    /// allowed entries when `allow` is given.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        allow: Option<&[bool]>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = matrix_dims(t, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::Dimension(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(mask) = allow {
            if mask.len() != m * n {
                return Err(Error::Dimension(format!("mask length {} for [{m}, {n}]", mask.len())));
            }
        }
        for (i, &tg) in targets.iter().enumerate() {
            if tg >= n || allow.is_some_and(|mask| !mask[i * n + tg]) {
                return Err(Error::Contract(format!("target {tg} of row {i} is not an allowed column")));
            }
        }
        let probs = masked_softmax(t.data(), m, n, allow)?;
        let mut loss = T::zero();
        for (i, &tg) in targets.iter().enumerate() {
            let row = t.row(i);
            let max = (0..n)
                .filter(|&j| allow.is_none_or(|mask| mask[i * n + j]))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            let lse = max
                + (0..n)
                    .filter(|&j| allow.is_none_or(|mask| mask[i * n + j]))
                    .map(|j| (row[j] - max).exp())
                    .sum::<T>()
                    .ln();
            loss += lse - row[tg];
        }
        loss /= T::from_usize(m).unwrap();
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.derived(Tensor::scalar(loss), op, &[logits]))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every trainable leaf reachable from
    /// `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut tmp: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        tmp[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(mut gout) = tmp[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(kind) = node.op.kind() else {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, &g)| *a += g),
                    slot @ None => *slot = Some(gout),
                }
                continue;
            };
            if self.fault == Some(kind) {
                gout.iter_mut().for_each(|g| *g = *g + *g);
            }
            self.propagate(i, &gout, &mut tmp);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[T], tmp: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:expr) => {
                if let Some($g) = grad_slot(nodes, tmp, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                with_grad!(*a, |ga| matmul_nt_acc(gout, val(*b).data(), m, n, k, ga));
                with_grad!(*b, |gb| matmul_tn_acc(val(*a).data(), gout, m, k, n, gb));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                with_grad!(*a, |ga| matmul_acc(gout, val(*b).data(), m, n, k, ga));
                with_grad!(*b, |gb| matmul_tn_acc(gout, val(*a).data(), m, n, k, gb));
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| axpy(ga, gout, T::one()));
                with_grad!(*b, |gb| axpy(gb, gout, T::one()));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| axpy(ga, gout, T::one()));
                with_grad!(*b, |gb| axpy(gb, gout, -T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                with_grad!(*a, |ga| {
                    for ((g, &o), &y) in ga.iter_mut().zip(gout).zip(bv) {
                        *g += o * y;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((g, &o), &x) in gb.iter_mut().zip(gout).zip(av) {
                        *g += o * x;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                with_grad!(*a, |ga| axpy(ga, gout, T::one()));
                let n = val(*bias).len();
                with_grad!(*bias, |gb| {
                    for row in gout.chunks(n) {
                        axpy(gb, row, T::one());
                    }
                });
            }
            Op::Scale(a, c) => with_grad!(*a, |ga| axpy(ga, gout, *c)),
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                with_grad!(*x, |gx| {
                    for ((gr, yr), gor) in gx.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                        let s = dot(gor, yr);
                        for j in 0..n {
                            gr[j] += yr[j] * (gor[j] - s);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                with_grad!(*x, |gx| {
                    for ((g, &o), &v) in gx.iter_mut().zip(gout).zip(xv) {
                        *g += o * (normal_cdf(v) + v * normal_pdf(v));
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = val(*gain).len();
                let gv = val(*gain).data();
                with_grad!(*gain, |gg| {
                    for (go, xh) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += go[j] * xh[j];
                        }
                    }
                });
                with_grad!(*bias, |gb| {
                    for go in gout.chunks(d) {
                        axpy(gb, go, T::one());
                    }
                });
                let dn = T::from_usize(d).unwrap();
                with_grad!(*x, |gx| {
                    for (r, ((gxr, go), xh)) in
                        gx.chunks_mut(d).zip(gout.chunks(d)).zip(xhat.chunks(d)).enumerate()
                    {
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for j in 0..d {
                            let gh = go[j] * gv[j];
                            mean_g += gh;
                            mean_gx += gh * xh[j];
                        }
                        mean_g /= dn;
                        mean_gx /= dn;
                        for j in 0..d {
                            let gh = go[j] * gv[j];
                            gxr[j] += inv_std[r] * (gh - mean_g - xh[j] * mean_gx);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = val(*table).cols();
                with_grad!(*table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d], T::one());
                    }
                });
            }
            Op::SelectRows { x, rows } => {
                let d = val(*x).cols();
                with_grad!(*x, |gx| {
                    for (r, &src) in rows.iter().enumerate() {
                        axpy(&mut gx[src * d..(src + 1) * d], &gout[r * d..(r + 1) * d], T::one());
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = val(*x).cols();
                let w = node.value.cols();
                with_grad!(*x, |gx| {
                    for (gr, go) in gx.chunks_mut(n).zip(gout.chunks(w)) {
                        axpy(&mut gr[*start..start + w], go, T::one());
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    with_grad!(p, |gp| {
                        for (gr, go) in gp.chunks_mut(w).zip(gout.chunks(n)) {
                            axpy(gr, &go[offset..offset + w], T::one());
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    with_grad!(p, |gp| axpy(gp, &gout[offset..offset + len], T::one()));
                    offset += len;
                }
            }
            Op::MeanRows(x) => {
                let n = val(*x).cols();
                let m = T::from_usize(val(*x).rows()).unwrap();
                with_grad!(*x, |gx| {
                    for gr in gx.chunks_mut(n) {
                        axpy(gr, gout, T::one() / m);
                    }
                });
            }
            Op::Sum(x) => with_grad!(*x, |gx| gx.iter_mut().for_each(|g| *g += gout[0])),
            Op::Mean(x) => {
                let c = gout[0] / T::from_usize(val(*x).len()).unwrap();
                with_grad!(*x, |gx| gx.iter_mut().for_each(|g| *g += c));
            }
            Op::NormalizeRows { x, norms } => {
                let n = node.value.cols();
                let y = node.value.data();
                with_grad!(*x, |gx| {
                    for (r, ((gr, go), yr)) in
                        gx.chunks_mut(n).zip(gout.chunks(n)).zip(y.chunks(n)).enumerate()
                    {
                        let s = dot(go, yr);
                        for j in 0..n {
                            gr[j] += (go[j] - yr[j] * s) / norms[r];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = val(*logits).cols();
                let c = gout[0] / T::from_usize(targets.len()).unwrap();
                with_grad!(*logits, |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        let gr = &mut gl[i * n..(i + 1) * n];
                        let pr = &probs[i * n..(i + 1) * n];
                        for j in 0..n {
                            gr[j] += c * pr[j];
                        }
                        gr[t] -= c;
                    }
                });
            }
        }
    }
}

/// Gradient buffer for an input, or None if it is not differentiable.
fn grad_slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    tmp: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(tmp[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn axpy<T: Scalar>(y: &mut [T], x: &[T], a: T) {
    y.iter_mut().zip(x).for_each(|(yi, &xi)| *yi += a * xi);
}

fn masked_softmax<T: Scalar>(x: &[T], m: usize, n: usize, allow: Option<&[bool]>) -> Result<Vec<T>> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let ok = |j: usize| allow.is_none_or(|mask| mask[i * n + j]);
        let max = (0..n).filter(|&j| ok(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            return Err(Error::Numeric(format!("softmax row {i} has no finite allowed entry")));
        }
        let o = &mut out[i * n..(i + 1) * n];
        let mut z = T::zero();
        for j in (0..n).filter(|&j| ok(j)) {
            o[j] = (row[j] - max).exp();
            z += o[j];
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    Ok(out)
}
