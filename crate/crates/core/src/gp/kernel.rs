//! Matérn-5/2 kernel with per-dimension lengthscales.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Hyperparameters in normalized-input / standardized-target units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams<T> {
    pub lengthscales: Vec<T>,
    pub signal_variance: T,
    pub mean_const: T,
    /// Diagonal term added to the gram matrix, absolute units.
    pub noise_jitter: T,
}

impl<T: Real> KernelHyperparams<T> {
    /// Unit signal variance, zero mean, lengthscale 0.5 in every dimension.
    pub fn default_for(dim: usize) -> Self {
        Self {
            lengthscales: vec![T::lit(0.5); dim],
            signal_variance: T::one(),
            mean_const: T::zero(),
            noise_jitter: T::lit(1e-8),
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.iter().any(|l| !(*l > T::zero())) {
            return Err(Error::InvalidArgument("lengthscales must be positive".into()));
        }
        if !(self.signal_variance > T::zero()) || !self.mean_const.is_finite() {
            return Err(Error::InvalidArgument("signal variance must be positive".into()));
        }
        if !(self.noise_jitter >= T::zero()) {
            return Err(Error::InvalidArgument("jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sqrt5<T: Real>() -> T {
    T::lit(5.0f64.sqrt())
}

/// Scaled distance `r = sqrt(sum ((a_j - b_j) / l_j)^2)`.
#[inline]
pub fn scaled_distance<T: Real>(a: &[T], b: &[T], lengthscales: &[T]) -> T {
    let mut s = T::zero();
    for ((x, y), l) in a.iter().zip(b).zip(lengthscales) {
        let d = (*x - *y) / *l;
        s += d * d;
    }
    s.sqrt()
}

/// Matérn-5/2 correlation at scaled distance `r`.
#[inline]
pub fn matern52<T: Real>(r: T) -> T {
    let sr = sqrt5::<T>() * r;
    (T::one() + sr + sr * sr / T::lit(3.0)) * (-sr).exp()
}

/// Covariance `k(a, b)`.
#[inline]
pub fn kernel<T: Real>(a: &[T], b: &[T], h: &KernelHyperparams<T>) -> T {
    h.signal_variance * matern52(scaled_distance(a, b, &h.lengthscales))
}

/// `sigma^2 (5/3) (1 + sqrt5 r) exp(-sqrt5 r)`; the common factor of the
/// kernel's derivatives with respect to inputs and log-lengthscales.
#[inline]
pub(crate) fn radial_slope<T: Real>(r: T, signal_variance: T) -> T {
    let sr = sqrt5::<T>() * r;
    signal_variance * T::lit(5.0 / 3.0) * (T::one() + sr) * (-sr).exp()
}

/// `k(q, x)` and its gradient with respect to `q`, written into `grad`.
#[inline]
pub fn kernel_with_grad<T: Real>(q: &[T], x: &[T], h: &KernelHyperparams<T>, grad: &mut [T]) -> T {
    let r = scaled_distance(q, x, &h.lengthscales);
    let slope = radial_slope(r, h.signal_variance);
    for j in 0..q.len() {
        let l = h.lengthscales[j];
        grad[j] = -slope * (q[j] - x[j]) / (l * l);
    }
    h.signal_variance * matern52(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn correlation_at_zero_and_decay() {
        assert_eq!(matern52(0.0f64), 1.0);
        assert!(matern52(1.0f64) < matern52(0.5));
        // (1 + sqrt5 + 5/3) exp(-sqrt5), evaluated with Python.
        assert_relative_eq!(matern52(1.0f64), 0.523_994_108_831_820_3, max_relative = 1e-14);
    }

    #[test]
    fn query_gradient_matches_finite_difference() {
        let h = KernelHyperparams { lengthscales: vec![0.3, 0.8], signal_variance: 1.7, mean_const: 0.0, noise_jitter: 0.0 };
        let q = [0.2, 0.6];
        let x = [0.35, 0.1];
        let mut g = [0.0; 2];
        kernel_with_grad(&q, &x, &h, &mut g);
        let eps = 1e-6;
        for j in 0..2 {
            let mut qp = q;
            let mut qm = q;
            qp[j] += eps;
            qm[j] -= eps;
            let fd = (kernel(&qp, &x, &h) - kernel(&qm, &x, &h)) / (2.0 * eps);
            assert_relative_eq!(g[j], fd, max_relative = 1e-7);
        }
    }
}
