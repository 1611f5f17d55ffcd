//! Finite-difference verification of reverse-mode gradients.
//!
//! Runs in `f64` only: central differences against a 1e-4 relative tolerance
//! are too noisy in `f32`.

use super::{Graph, Tensor, VarId};
use crate::error::{Error, Result};

/// Outcome of a gradient check, tracking the worst coordinate.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Checks a scalar-valued function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, VarId) -> Result<VarId>,
{
    grad_check_multi(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(point),
        eps,
    )
}

/// Checks a scalar-valued function of several tensors. Every coordinate of
/// every input is perturbed by `±eps`; the relative error of the analytic
/// gradient against `(f(x+eps) - f(x-eps)) / (2 eps)` is
/// `|a - n| / max(1e-8, |a| + |n|)`, maximized over coordinates.
pub fn grad_check_multi<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[VarId]) -> Result<VarId>,
{
    // Analytic pass.
    let mut graph = Graph::new();
    let vars: Vec<VarId> = points
        .iter()
        .map(|p| graph.param(p.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&mut graph, &vars)?;
    if !graph.value(loss).is_scalar() {
        return Err(Error::InvalidArgument(format!(
            "grad_check target must be scalar, got {:?}",
            graph.value(loss).shape()
        )));
    }
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| {
            graph
                .grad(v)
                .map(|t| t.into_data())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    // Plain forward evaluation at a perturbed point.
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<VarId> = perturbed
            .iter()
            .map(|p| g.input(p.clone()))
            .collect::<Result<_>>()?;
        let l = f(&mut g, &vs)?;
        Ok(g.value(l).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
    };
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for ci in 0..point.numel() {
            let orig = point.data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = pi;
                report.worst_coord = ci;
            }
        }
    }
    Ok(report)
}
