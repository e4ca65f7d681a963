//! Central finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smallest and largest step accepted by [`finite_diff_check`].
pub const EPS_RANGE: (f64, f64) = (1e-7, 1e-3);

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` on every coordinate of `x`.
///
/// `f` receives a fresh tape and the leaf holding `x` and must return a
/// scalar node. The result is `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, eps, &all)
}

/// Same as [`finite_diff_check`] restricted to the listed coordinates.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(EPS_RANGE.0..=EPS_RANGE.1).contains(&eps) {
        return Err(TensorError::Argument {
            op: "finite_diff_check",
            reason: format!("eps {eps} outside [{}, {}]", EPS_RANGE.0, EPS_RANGE.1),
        });
    }
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    let analytic = tape.backward(out)?.get_or_zeros(leaf, x.shape());

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(probe);
        let out = f(&mut tape, leaf)?;
        tape.value(out).item()
    };

    let mut worst = 0.0f64;
    for &i in coords {
        let base = x.data()[i];
        let plus = eval(x.with_value(i, base + eps))?;
        let minus = eval(x.with_value(i, base - eps))?;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
