//! Central finite differences, the reference every analytic gradient is checked against.

use ndarray::ArrayD;

use super::tensor::FeatureMap;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad(
    mut f: impl FnMut(&FeatureMap) -> f64,
    x: &FeatureMap,
    eps: f64,
) -> Result<FeatureMap> {
    let grad = finite_diff_grad_array(
        |a| {
            let fm = FeatureMap::from_array_unchecked(
                a.view().into_dimensionality().expect("rank 3").to_owned(),
            );
            f(&fm)
        },
        &x.data().clone().into_dyn(),
        eps,
    )?;
    Ok(FeatureMap::from_array_unchecked(
        grad.into_dimensionality().expect("rank 3"),
    ))
}

/// Same as [`finite_diff_grad`] for an arbitrary-rank array (weights, vectors).
pub fn finite_diff_grad_array(
    mut f: impl FnMut(&ArrayD<f64>) -> f64,
    x: &ArrayD<f64>,
    eps: f64,
) -> Result<ArrayD<f64>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.as_standard_layout().into_owned();
    let mut grad = ArrayD::zeros(probe.raw_dim());
    let n = probe.len();
    for k in 0..n {
        let orig = probe.as_slice().unwrap()[k];
        probe.as_slice_mut().unwrap()[k] = orig + eps;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[k] = orig - eps;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "function value is not finite at coordinate {k}"
            )));
        }
        grad.as_slice_mut().unwrap()[k] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}
