//! Central-difference gradient validation.

use crate::tensor::{Tensor, TensorError};

/// Denominator guard in the relative-error formula.
const REL_EPS: f64 = 1e-6;

/// Compares an analytic gradient against central finite differences of `f`.
///
/// Returns `max_i |analytic[i] - central[i]| / (|central[i]| + 1e-6)`.
/// `f` is evaluated at `x ± h·e_i` for every coordinate; a non-finite value
/// of `f` is reported with the coordinate that produced it.
pub fn finite_diff_check<F>(
    mut f: F,
    x: &Tensor,
    analytic: &[f64],
    h: f64,
) -> Result<f64, TensorError>
where
    F: FnMut(&Tensor) -> Result<f64, TensorError>,
{
    assert_eq!(
        analytic.len(),
        x.numel(),
        "analytic gradient length {} does not match input size {}",
        analytic.len(),
        x.numel()
    );
    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite {
                context: "finite_diff_check probe".to_string(),
                index: i,
            });
        }
        let central = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - central).abs() / (central.abs() + REL_EPS);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
