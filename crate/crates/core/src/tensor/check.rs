use super::{Result, Scalar, Tensor, TensorError};

/// Central-difference gradient estimate of a scalar function:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_diff_grad<F, Fun>(mut f: Fun, x: &Tensor<F>, step: f64) -> Result<Tensor<F>>
where
    F: Scalar,
    Fun: FnMut(&Tensor<F>) -> Result<F>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = F::from_f64(orig.as_f64() + step);
        let up = f(&probe)?;
        probe.data_mut()[i] = F::from_f64(orig.as_f64() - step);
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFinite { op: "finite_diff_grad" });
        }
        grad.push(F::from_f64((up.as_f64() - down.as_f64()) / (2.0 * step)));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_relative_error<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| relative_error(x.as_f64(), y.as_f64(), floor))
        .fold(0.0, f64::max)
}
