//! Central-difference gradient checking against the autodiff engine.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compare analytic gradients of a scalar function with central
/// differences. Returns the maximum over all parameter coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` receives a fresh graph and one leaf per entry of `params` and must
/// return a scalar.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with_floor(f, params, eps, 1e-8)
}

/// [`grad_check`] with the denominator floor set by the caller. Coordinates
/// whose gradient is below `floor` in magnitude are then judged by absolute
/// error scaled by `1/floor`; central differences cannot resolve gradients
/// near `f64::EPSILON · |f| / eps` anyway.
pub fn grad_check_with_floor<F>(f: F, params: &[Tensor], eps: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base = g.value(loss).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("grad_check loss = {base}")));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let l = f(&mut g, &vars)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check loss = {v}")));
        }
        Ok(v)
    };

    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient [{pi}][{k}] = {a}")));
            }
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
