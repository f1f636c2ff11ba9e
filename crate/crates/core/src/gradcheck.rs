//! Central finite differences, used as the reference for analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every element `i` of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!(
            "finite difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut probe = x.clone();
    probe.clear_grad();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad objective"));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::new(x.shape(), grad)
}

/// Element-wise relative error `|a - b| / max(|a|, |b|, 1e-8)`, maximized.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
