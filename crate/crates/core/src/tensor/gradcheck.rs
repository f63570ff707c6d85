//! Central-difference verification of taped gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the taped gradient of the scalar program `f` at `theta` against
/// central differences with step `h`, returning the worst relative error
/// over all entries of `theta`.
///
/// `f` receives a fresh tape and the handle of `theta` on it; it is called
/// once for the analytic gradient and twice per entry for the numeric one.
pub fn grad_check<F>(mut f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(theta.clone());
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out)?.get_or_zeros(&tape, v);

    let mut eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };

    let mut worst = 0.0_f64;
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus.data_mut()[i] += h;
        let mut minus = theta.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
