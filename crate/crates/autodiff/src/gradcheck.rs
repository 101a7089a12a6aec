//! Central finite-difference gradient checks.
//!
//! Agreement is measured per tensor as the norm-wise relative error
//! `|a - n| / max(|a|, |n|, floor)`, where `a` and `n` are the analytic and
//! numeric gradient vectors. The floor is `1e-6 * max(1, |f|)` for the
//! function value `f`, so tensors whose gradient is identically zero (for
//! instance a key bias under softmax) do not turn finite-difference round-off
//! into a spurious relative error.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub relative_error: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checks.iter().all(|c| c.relative_error <= tol)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    relative_error_floored(analytic, numeric, NORM_FLOOR)
}

fn relative_error_floored(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor)
}

/// Check gradients of a scalar function with respect to its input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let floor = NORM_FLOOR * g.item(out)?.abs().max(1.0);
    let grads = g.backward(out, &mut store)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.item(out)
    };

    let mut checks = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *num = (fp - fm) / (2.0 * eps);
        }
        checks.push(TensorCheck {
            name: format!("input{i}"),
            relative_error: relative_error_floored(&analytic, &numeric, floor),
            analytic_norm: analytic.iter().map(|a| a * a).sum::<f64>().sqrt(),
        });
    }
    Ok(GradCheckReport { checks })
}

/// Check gradients of a scalar function with respect to the trainable
/// parameters of `store` (restricted to `only`, when given).
pub fn check_params<F>(
    store: &mut ParamStore,
    only: Option<&[ParamId]>,
    f: F,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let floor = NORM_FLOOR * g.item(out)?.abs().max(1.0);
    g.backward(out, store)?;

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect(),
    };
    let mut checks = Vec::new();
    for id in ids {
        let analytic = store.get(id).grad.clone();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + eps;
            let fp = {
                let mut g = Graph::new();
                let o = f(&mut g, store)?;
                g.item(o)?
            };
            store.get_mut(id).value.data_mut()[j] = orig - eps;
            let fm = {
                let mut g = Graph::new();
                let o = f(&mut g, store)?;
                g.item(o)?
            };
            store.get_mut(id).value.data_mut()[j] = orig;
            *num = (fp - fm) / (2.0 * eps);
        }
        checks.push(TensorCheck {
            name: store.get(id).name.clone(),
            relative_error: relative_error_floored(&analytic, &numeric, floor),
            analytic_norm: analytic.iter().map(|a| a * a).sum::<f64>().sqrt(),
        });
    }
    store.zero_grad();
    Ok(GradCheckReport { checks })
}
