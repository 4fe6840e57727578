//! Central-difference gradient verification.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|)` seen.
    pub max_rel_error: f64,
    /// `(parameter, coordinate)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Picks at most `limit` coordinates spread evenly across `len`.
fn sample_coords(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        return (0..len).collect();
    }
    (0..limit).map(|i| i * len / limit).collect()
}

/// Compares supplied analytic gradients against central differences of `f`.
pub fn compare_gradients<F>(
    f: F,
    params: &[Tensor],
    analytic: &[Vec<f32>],
    eps: f32,
    tol: f64,
    coords_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::invalid(format!("epsilon {eps} outside [1e-4, 1e-2]")));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape("grad_check", "one gradient per parameter"));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.len() != params[pi].len() {
            return Err(Error::shape("grad_check", format!("gradient {pi} length")));
        }
        for c in sample_coords(grad.len(), coords_per_param) {
            let orig = params[pi].data()[c];
            let plus = orig + eps;
            let minus = orig - eps;
            work[pi].data_mut()[c] = plus;
            let fp = f(&work)?;
            work[pi].data_mut()[c] = minus;
            let fm = f(&work)?;
            work[pi].data_mut()[c] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite("grad_check loss"));
            }
            let numeric = (fp - fm) / (plus as f64 - minus as f64);
            let a = grad[c] as f64;
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                if rel >= max_rel {
                    worst = Some((pi, c));
                }
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        checked,
        tolerance: tol,
        passed: max_rel <= tol,
    })
}

/// Builds `loss_fn` on a fresh graph with `params` as trainable leaves,
/// back-propagates, and checks the result against central differences.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], eps: f32, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = loss_fn(&g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).map_or_else(|| vec![0.0; p.len()], <[f32]>::to_vec))
        .collect();
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = loss_fn(&g, &vars)?;
        Ok(g.scalar_value(loss) as f64)
    };
    compare_gradients(eval, params, &analytic, eps, tol, 48)
}
