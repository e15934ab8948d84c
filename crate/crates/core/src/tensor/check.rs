//! Finite-difference gradient verification.
//!
//! Runs in 64-bit precision end to end: the function under test is built
//! from `Tensor<f64>` leaves so analytic gradients and central differences
//! can be compared at tolerances far below f32 round-off.

use super::{Tensor, TensorError, TensorResult};

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares analytic gradients of `f` against central differences for every
/// element of every input, returning the maximum relative error.
///
/// The relative error denominator is `max(|analytic|, |numeric|, 1e-8)`.
/// `f` must be a deterministic scalar-valued function of the inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> TensorResult<f64>
where
    F: Fn(&[Tensor<f64>]) -> TensorResult<Tensor<f64>>,
{
    for t in inputs {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    let loss = f(inputs)?;
    if loss.numel() != 1 {
        return Err(TensorError::InvalidShape(format!(
            "grad_check function must return a scalar, got {:?}",
            loss.shape()
        )));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut max_rel = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let original = t.data()[i];
            t.data_mut()[i] = original + eps;
            let plus = f(inputs)?.item()?;
            t.data_mut()[i] = original - eps;
            let minus = f(inputs)?.item()?;
            t.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
