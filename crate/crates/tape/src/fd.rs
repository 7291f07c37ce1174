//! Central finite differences, used to validate analytic gradients.

use crate::Tensor;

/// Central-difference gradient of a scalar function at `x`.
pub fn numerical_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * step);
    }
    out
}

/// Largest entrywise deviation between two gradients, relative to the
/// larger of their infinity norms. Returns 0 when both are (near) zero.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let scale = analytic.max_abs().max(numeric.max_abs());
    let diff = analytic.max_abs_diff(numeric);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
