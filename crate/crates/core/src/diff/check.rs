use super::{Array, Graph, Tensor};
use crate::error::{Error, Result};

fn evaluate<F>(f: &F, point: &Array) -> Result<f64>
where
    F: Fn(&mut Graph, Tensor) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let x = point.to_constant(&mut g);
    let y = f(&mut g, x)?;
    if g.value(y).len() != 1 {
        return Err(Error::NonScalarRoot(g.shape(y).to_vec()));
    }
    Ok(g.item(y))
}

/// Central-difference gradient of a scalar function at `point`.
pub fn numeric_gradient<F>(f: F, point: &Array, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = point.clone();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x0 = point.data[i];
        probe.data[i] = x0 + eps;
        let hi = evaluate(&f, &probe)?;
        probe.data[i] = x0 - eps;
        let lo = evaluate(&f, &probe)?;
        probe.data[i] = x0;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite {
                what: "finite-difference probe".into(),
                index: i,
            });
        }
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

/// Compare the recorded gradient of `f` at `point` against central
/// differences. Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, point: &Array, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Tensor) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let x = point.to_param(&mut g);
    let y = f(&mut g, x)?;
    if let Some(i) = g.value(y).iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "function value".into(),
            index: i,
        });
    }
    let grads = g.backward(y)?;
    let analytic = grads.get_or_zeros(x, point.len());
    let numeric = numeric_gradient(&f, point, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max))
}
