//! Finite-difference validation of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magnitude below which gradients are compared absolutely rather than
/// relatively; central differences carry roughly `1e-16 / eps` of
/// round-off, so tinier gradients cannot be resolved.
pub const GRADCHECK_FLOOR: f64 = 1e-7;

/// Relative disagreement between two derivative estimates.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Largest relative error, over all coordinates of `x`, between the tape
/// gradient of `f` and the fourth-order central difference
/// `(f(x - 2h) - 8 f(x - h) + 8 f(x + h) - f(x + 2h)) / (12 h)` with
/// `h = eps` along each coordinate.
///
/// `f` must be deterministic and return a scalar.
pub fn fd_gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("eps {eps} outside [1e-8, 1e-3]")));
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let loss = f(&tape, xv)?;
        tape.backward(loss)?;
        xv.grad().expect("leaf gradient after backward")
    };

    let eval = |probe: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.constant(probe);
        let v = f(&tape, xv)?.item();
        if !v.is_finite() {
            return Err(Error::Numeric(
                "objective non-finite at a probe point".into(),
            ));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let at = |d: f64| {
            let mut probe = x.clone();
            probe.data_mut()[i] += d;
            eval(probe)
        };
        let numeric =
            (at(-2.0 * eps)? - 8.0 * at(-eps)? + 8.0 * at(eps)? - at(2.0 * eps)?) / (12.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
