use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` of a scalar function of
/// one coordinate.
pub fn central_difference<F>(mut f: F, x0: f64, step: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let hi = f(x0 + step)?;
    let lo = f(x0 - step)?;
    if !hi.is_finite() || !lo.is_finite() {
        return Err(Error::NonFinite { op: "central_difference" });
    }
    Ok((hi - lo) / (2.0 * step))
}

/// Compares the reverse-mode gradient of a scalar-valued `f` at `x` with
/// central differences, element by element. Returns the maximum relative
/// error as defined by [`relative_error`].
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'g> Fn(Var<'g>) -> Result<Var<'g>>,
{
    let graph = Graph::with_finite_checks(true);
    let xv = graph.param(x.clone())?;
    let y = f(xv)?;
    graph.backward(y)?;
    let analytic = graph.grad_or_zeros(xv);

    let eval = |t: &Tensor| -> Result<f64> {
        let g = Graph::with_finite_checks(true);
        let v = g.param(t.clone())?;
        f(v)?.item()
    };

    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let numeric = central_difference(
            |xi| {
                probe.data_mut()[i] = xi;
                eval(&probe)
            },
            x0,
            step,
        )?;
        probe.data_mut()[i] = x0;
        let a = analytic.data()[i];
        if !a.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference_check" });
        }
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}
