use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of the scalar function `f` at `x`
/// against central differences with step `h`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1e-8, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: Real) -> Result<Real>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = {
        let graph = Graph::new();
        let xv = graph.param(x.clone());
        let loss = f(&graph, xv)?;
        graph.backward(loss)?.wrt_or_zero(xv)
    };
    let eval = |probe: Tensor| -> Result<Real> {
        let graph = Graph::new();
        let xv = graph.constant(probe);
        let y = f(&graph, xv)?;
        if y.value().numel() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        Ok(y.item())
    };
    let mut worst: Real = 0.0;
    let at = |i: usize, offset: Real| -> Result<Real> {
        let mut probe = x.clone();
        probe.data_mut()[i] += offset;
        eval(probe)
    };
    for i in 0..x.numel() {
        let numeric = (at(i, h)? - at(i, -h)?) / (2.0 * h);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient estimate at component {i}: analytic {a}, numeric {numeric}"
            )));
        }
        let floor: Real = 1e-8;
        worst = worst.max((a - numeric).abs() / floor.max(a.abs()));
    }
    Ok(worst)
}
