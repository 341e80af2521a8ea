use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use super::arch::PnnParams;
use super::model::{batch_loss, grad};
use super::Sequence;
use crate::{Error, Result};

/// Largest parameter count [`finite_diff_check`] will perturb one by one.
pub const MAX_CHECKED_PARAMS: usize = 10_000;

/// Max over coordinates of `|a − n| / max(1e-8, |a| + |n|)` where `n` is the
/// central difference `(f(x+ε) − f(x−ε)) / 2ε`.
pub fn max_relative_error<F>(mut f: F, x: &[f64], analytic: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {epsilon}"
        )));
    }
    if x.len() != analytic.len() {
        return Err(Error::InvalidArgument("gradient length mismatch".to_string()));
    }
    let mut probe: Vec<f64> = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + epsilon;
        let plus = f(&probe)?;
        probe[i] = x[i] - epsilon;
        let minus = f(&probe)?;
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Compares [`grad`] with central differences of the batch loss.
pub fn finite_diff_check(params: &PnnParams, batch: &[Sequence<'_>], epsilon: f64) -> Result<f64> {
    if params.len() > MAX_CHECKED_PARAMS {
        return Err(Error::InvalidArgument(format!(
            "{} parameters exceed the finite-difference limit of {MAX_CHECKED_PARAMS}",
            params.len()
        )));
    }
    let (analytic, _) = grad(params, batch)?;
    let mut probe = params.clone();
    max_relative_error(
        |x| {
            probe.values.copy_from_slice(x);
            batch_loss(&probe, batch)
        },
        &params.values,
        &analytic.0,
        epsilon,
    )
}
