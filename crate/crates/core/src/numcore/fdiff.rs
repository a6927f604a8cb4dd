use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `x`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        for v in [plus, minus] {
            if !v.is_finite() {
                return Err(Error::NonFinite { index: i, value: v });
            }
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}
