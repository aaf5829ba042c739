//! Finite-difference gradient oracle.
//!
//! Deliberately independent of the tape: it only evaluates the forward
//! function, so it can vouch for every analytic backward rule. Run it in
//! `f64`; single precision drowns the central-difference signal.

use super::tensor::{Real, Tensor};

/// Central-difference gradient of a scalar function: per coordinate,
/// (f(x + h·e) - f(x - h·e)) / 2h.
pub fn finite_difference_gradient<R: Real>(
    f: impl Fn(&Tensor<R>) -> R,
    x: &Tensor<R>,
    h: f64,
) -> Tensor<R> {
    let step = R::from_f64(h);
    let two = R::from_f64(2.0);
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (two * step);
    }
    grad
}

/// max_i |a_i - b_i| / max(1, |a_i|, |b_i|): absolute for small entries,
/// relative for large ones.
pub fn max_relative_error<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_relative_error shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64(), y.to_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}
