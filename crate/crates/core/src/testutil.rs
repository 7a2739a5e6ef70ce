//! Helpers for unit tests: central finite differences and comparison.

use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;

/// Central-difference gradient of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

/// Largest relative error, ignoring entries whose absolute error is below
/// `floor`.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff <= floor {
                0.0
            } else {
                diff / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}

pub fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    crate::rng::rng_uniform(rng, shape, -1.0, 1.0).unwrap()
}

/// Loss used to turn tensor outputs into scalars: `<out, weights>`.
pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}
