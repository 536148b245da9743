//! Gradient verification against central finite differences.

use crate::error::{Error, Result};

use super::{Tape, Tensor};

/// Outcome of a gradient check for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    /// Names of parameters whose error exceeded the tolerance.
    pub flagged: Vec<String>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Evaluate the scalar loss once on a fresh tape.
pub fn forward_value<F>(f: &F) -> Result<f64>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    let tape = Tape::new();
    let loss = f(&tape)?;
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "loss must be scalar, got shape {:?}",
            loss.shape()
        )));
    }
    Ok(loss.item())
}

/// Analytic gradients of `f` with respect to `params`, one flat buffer per
/// parameter. Existing gradients are cleared before and after so the check
/// is self-contained.
pub fn analytic_grads<F>(f: &F, params: &[(String, Tensor)]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    for (_, p) in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape)?;
    tape.backward(&loss)?;
    let grads = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for (_, p) in params {
        p.zero_grad();
    }
    Ok(grads)
}

fn rel_err(a: f64, n: f64) -> f64 {
    // Below this floor both values are numerical noise for O(1) losses.
    const FLOOR: f64 = 1e-7;
    if a.abs() < FLOOR && n.abs() < FLOOR {
        0.0
    } else {
        (a - n).abs() / a.abs().max(n.abs())
    }
}

/// Compare supplied analytic gradients against central finite differences
/// of `f`. Parameters are perturbed in place and restored.
pub fn check_against_fd<F>(
    f: &F,
    params: &[(String, Tensor)],
    analytic: &[Vec<f64>],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    if analytic.len() != params.len() {
        return Err(Error::contract(
            "analytic gradient count does not match parameter count",
        ));
    }
    let mut per_param = Vec::with_capacity(params.len());
    let mut flagged = Vec::new();
    let mut overall = 0.0f64;
    for ((name, p), grads) in params.iter().zip(analytic) {
        let mut worst = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in 0..p.numel() {
            let orig = p.elem(idx);
            p.set_elem(idx, orig + step);
            let plus = forward_value(f)?;
            p.set_elem(idx, orig - step);
            let minus = forward_value(f)?;
            p.set_elem(idx, orig);
            let fd = (plus - minus) / (2.0 * step);
            let err = rel_err(grads[idx], fd);
            if err > worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_index = idx;
                worst.analytic = grads[idx];
                worst.numeric = fd;
            }
        }
        overall = overall.max(worst.max_rel_err);
        if worst.max_rel_err > tol {
            flagged.push(name.clone());
        }
        per_param.push(worst);
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: overall,
        tol,
        flagged,
    })
}

/// Full check: verifies `f` is deterministic, computes analytic gradients,
/// and compares them against central finite differences.
pub fn grad_check<F>(
    f: &F,
    params: &[(String, Tensor)],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    let a = forward_value(f)?;
    let b = forward_value(f)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::contract(format!(
            "gradient check requires a deterministic function: two forward passes gave {a} and {b}"
        )));
    }
    let grads = analytic_grads(f, params)?;
    check_against_fd(f, params, &grads, step, tol)
}
