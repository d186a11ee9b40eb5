//! Central-difference gradient verification.
//!
//! Every hand-derived backward pass in this crate is validated against this
//! routine in tests. It is O(2 * len(params)) loss evaluations, so callers
//! keep the probed models tiny.

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::scalar::Scalar;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares `analytic` against a central-difference estimate of the gradient
/// of `loss` at `params`, entry by entry, and returns the worst relative
/// error
///
/// ```text
/// |analytic - numeric| / max(1, |analytic| + |numeric|)
/// ```
///
/// A non-finite loss at any probe point aborts with a numeric-instability
/// error rather than reporting a meaningless comparison.
pub fn grad_check<S, F>(
    mut loss: F,
    params: &Matrix<S>,
    analytic: &Matrix<S>,
    step: f64,
) -> Result<S>
where
    S: Scalar,
    F: FnMut(&Matrix<S>) -> Result<S>,
{
    if params.shape() != analytic.shape() {
        return Err(Error::dims(
            "grad_check",
            format!("params {:?}, analytic {:?}", params.shape(), analytic.shape()),
        ));
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::invalid("step", "must be finite and positive"));
    }
    let h = S::cast(step);
    let two = S::cast(2.0);
    let one = S::one();
    let mut probe = params.clone();
    let mut worst = S::zero();
    for idx in 0..params.data().len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let up = loss(&probe)?;
        probe.data_mut()[idx] = orig - h;
        let down = loss(&probe)?;
        probe.data_mut()[idx] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NumericInstability(format!(
                "non-finite loss while probing parameter {idx}"
            )));
        }
        let numeric = (up - down) / (two * h);
        let a = analytic.data()[idx];
        let rel = (a - numeric).abs() / one.max(a.abs() + numeric.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}
