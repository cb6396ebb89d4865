use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NnError;

/// Denominator floor for the relative error, so coordinates whose true
/// derivative is zero compare on absolute error.
const REL_FLOOR: f64 = 1e-6;

/// Largest relative error between the backward pass and central finite
/// differences of `f` around `point`. `f` must return a single-element value.
///
/// Uses the five-point central stencil, whose truncation error is O(eps^4),
/// so curvature does not mask real gradient bugs at eps = 1e-3.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64, NnError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, NnError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad(x).unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |t: Tensor<f64>| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let x = tape.leaf(t);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };
    let shifted = |i: usize, h: f64| {
        let mut t = point.clone();
        t.data_mut()[i] += h;
        eval(t)
    };
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let near = shifted(i, eps)? - shifted(i, -eps)?;
        let far = shifted(i, 2.0 * eps)? - shifted(i, -2.0 * eps)?;
        let numeric = (8.0 * near - far) / (12.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
