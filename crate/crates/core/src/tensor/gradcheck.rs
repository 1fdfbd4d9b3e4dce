//! Central-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{contract, Result};

/// Discrepancy summary for one parameter tensor.
#[derive(Clone, Debug)]
pub struct TensorDiscrepancy {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat indices whose error exceeds both tolerances.
    pub flagged: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorDiscrepancy>,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.flagged.is_empty())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Compares the analytic gradient of `f` with central differences.
///
/// `f` builds a scalar on a fresh graph from leaf handles for `params`
/// and must be deterministic. An entry is flagged when its relative
/// error `|a−n| / max(|a|,|n|)` exceeds `rel_tol` and its absolute error
/// exceeds `abs_floor`.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[Tensor],
    step: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return contract("finite-difference step must be positive");
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let mut eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    for (ti, grad) in analytic.iter().enumerate() {
        let mut report = TensorDiscrepancy {
            index: ti,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            flagged: Vec::new(),
        };
        for (j, &a) in grad.iter().enumerate() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;

            let n = (plus - minus) / (2.0 * step);
            let abs = (a - n).abs();
            let scale = a.abs().max(n.abs());
            let rel = if scale == 0.0 { 0.0 } else { abs / scale };
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > rel_tol && abs > abs_floor {
                report.flagged.push(j);
            }
        }
        tensors.push(report);
    }

    Ok(GradCheckReport {
        tensors,
        rel_tol,
        abs_floor,
    })
}
