use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference estimate of `df/dx` for a scalar function.
pub fn finite_difference_grad(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let idx: Vec<usize> = (0..x.numel()).collect();
    let g = finite_difference_at(f, x, &idx, eps)?;
    Tensor::new(x.shape().to_vec(), g)
}

/// Central differences for the flat coordinates in `idx` only.
pub fn finite_difference_at(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    idx: &[usize],
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::arg(format!(
            "finite differences need eps > 0, got {eps}"
        )));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(idx.len());
    for &i in idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NumericFault {
                op: "finite_difference_grad",
            });
        }
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

/// Largest elementwise difference, relative to the largest magnitude in
/// either vector (floored at 1e-8 so all-zero gradients compare absolutely).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(1e-8, f64::max);
    diff / scale
}
