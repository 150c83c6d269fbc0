//! Central finite-difference verification of autodiff gradients.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::autodiff::{Graph, OpKind, Var};
use crate::checkpoint::Checkpoint;
use crate::curation::TrainingExample;
use crate::error::Result;
use crate::model::ModelVars;
use crate::tensor::Tensor;
use crate::trainer::{batch_graph, LossConfig};

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    /// Finite-difference step.
    pub step: f64,
    pub relative: f64,
    /// Errors below this are accepted regardless of magnitude.
    pub absolute_floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { step: 1e-5, relative: 1e-4, absolute_floor: 1e-6 }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let err = (analytic - numeric).abs();
        err <= self.absolute_floor.max(self.relative * analytic.abs().max(numeric.abs()))
    }
}

/// Outcome for one named parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    /// Worst offending element as (index, analytic, numeric).
    pub worst: Option<(usize, f64, f64)>,
}

impl ParamCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares the gradient of `loss_fn` from one backward pass against central
/// differences for every element of every parameter.
///
/// `loss_fn` receives the graph and one var per parameter, in order, and must
/// return a scalar loss. It is called twice per element, possibly from several
/// threads, so it must be pure.
pub fn check_gradients<F>(
    params: &[(String, Tensor<f64>)],
    tol: Tolerance,
    fault: Option<OpKind>,
    loss_fn: F,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync,
{
    let mut g = Graph::new();
    g.inject_fault(fault);
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, (_, t))| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        g.value(loss).item()
    };

    let base: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let elements: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(p, (_, t))| (0..t.len()).map(move |i| (p, i))).collect();
    let numeric: Vec<f64> = elements
        .par_iter()
        .map_init(
            || base.clone(),
            |values, &(p, i)| {
                let orig = values[p].data()[i];
                values[p].data_mut()[i] = orig + tol.step;
                let plus = eval(values);
                values[p].data_mut()[i] = orig - tol.step;
                let minus = eval(values);
                values[p].data_mut()[i] = orig;
                Ok((plus? - minus?) / (2.0 * tol.step))
            },
        )
        .collect::<Result<_>>()?;

    let mut report: Vec<ParamCheck> = params
        .iter()
        .map(|(name, _)| ParamCheck { name: name.clone(), checked: 0, failures: 0, max_abs_err: 0.0, worst: None })
        .collect();
    for (&(p, i), &num) in elements.iter().zip(&numeric) {
        let check = &mut report[p];
        let a = analytic[p][i];
        let err = (a - num).abs();
        check.checked += 1;
        if !tol.accepts(a, num) {
            check.failures += 1;
        }
        if err >= check.max_abs_err {
            check.max_abs_err = err;
            check.worst = Some((i, a, num));
        }
    }
    Ok(report)
}

/// Checks every parameter of `ckpt` through the encoder, pooling and the
/// contrastive loss of `batch`.
pub fn check_model_gradients(
    ckpt: &Checkpoint<f64>,
    batch: &[TrainingExample],
    n_hard: usize,
    loss: &LossConfig,
    tol: Tolerance,
    fault: Option<OpKind>,
) -> Result<Vec<ParamCheck>> {
    let names: Vec<String> = ckpt.names().map(String::from).collect();
    let params: Vec<(String, Tensor<f64>)> =
        names.iter().map(|n| Ok((n.clone(), ckpt.get(n)?.clone()))).collect::<Result<_>>()?;
    check_gradients(&params, tol, fault, |g, vars| {
        let bound: BTreeMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
        let mv = ModelVars::bind_existing(g, ckpt, &bound)?;
        Ok(batch_graph(g, &mv, &ckpt.config, batch, n_hard, loss, None)?.terms.loss)
    })
}
