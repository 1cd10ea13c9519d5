//! Central finite-difference oracle for gradient tests.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|analytic − numeric| / max(FLOOR, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(FLOOR)
}

/// Below this magnitude the comparison is absolute. Central differences at
/// ε = 1e-5 carry ~1e-11 of rounding noise, so gradients that are exactly
/// zero (an attention key bias, say) would otherwise look badly wrong.
pub const FLOOR: f64 = 1e-6;

/// Compares the tape gradient of the scalar function `f` at `x` against
/// central differences with step `epsilon`, returning the largest relative
/// error over all coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::NonScalarLoss(tape.value(out).shape().to_vec()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let v = tape.leaf(probe, false);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = x.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
