//! Dense Cholesky factorization for small symmetric positive-definite systems.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Jitter ladder for nearly singular gram matrices, relative to a scale.
pub const JITTER_START: f64 = 1e-8;
pub const JITTER_CAP: f64 = 1e-2;

/// Lower-triangular factor `L` with `A = L L^T`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Cholesky<T> {
    n: usize,
    l: Vec<T>,
}

impl<T: Real> Cholesky<T> {
    /// Factors the row-major `n x n` matrix `a`. Returns `None` when a pivot
    /// is not strictly positive.
    pub fn factor(a: &[T], n: usize) -> Option<Self> {
        assert_eq!(a.len(), n * n, "matrix size mismatch");
        let mut l = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[i * n + j];
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !(sum > T::zero()) || !sum.is_finite() {
                        return None;
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        Some(Self { n, l })
    }

    /// Factors `a + jitter I`, starting at `start * scale` and doubling the
    /// jitter until it exceeds `JITTER_CAP * scale`. Returns the factor and
    /// the jitter that succeeded.
    pub fn factor_jittered(a: &[T], n: usize, start: T, scale: T) -> Result<(Self, T)> {
        let cap = T::lit(JITTER_CAP) * scale;
        let mut jitter = start.max(T::lit(JITTER_START) * scale);
        let mut work = a.to_vec();
        loop {
            for i in 0..n {
                work[i * n + i] = a[i * n + i] + jitter;
            }
            if let Some(c) = Self::factor(&work, n) {
                return Ok((c, jitter));
            }
            if jitter * T::lit(2.0) > cap * T::lit(1.000_000_1) {
                return Err(Error::FactorizationFailure { jitter: jitter.as_f64() });
            }
            jitter = jitter * T::lit(2.0);
        }
    }

    pub fn empty() -> Self {
        Self { n: 0, l: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.l[i * self.n + j]
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [T]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let mut sum = b[i];
            for (lk, bk) in row.iter().zip(b.iter()) {
                sum -= *lk * *bk;
            }
            b[i] = sum / self.l[i * n + i];
        }
    }

    /// Solves `L^T x = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut [T]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut sum = b[i];
            for k in i + 1..n {
                sum -= self.l[k * n + i] * b[k];
            }
            b[i] = sum / self.l[i * n + i];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        self.solve_lower_in_place(b);
        self.solve_upper_in_place(b);
    }

    /// `ln det A`.
    pub fn log_det(&self) -> T {
        let mut s = T::zero();
        for i in 0..self.n {
            s += self.l[i * self.n + i].ln();
        }
        s * T::lit(2.0)
    }

    /// Dense `A^{-1}`, row-major.
    pub fn inverse(&self) -> Vec<T> {
        let n = self.n;
        let mut inv = vec![T::zero(); n * n];
        let mut col = vec![T::zero(); n];
        for j in 0..n {
            col.iter_mut().for_each(|c| *c = T::zero());
            col[j] = T::one();
            self.solve_in_place(&mut col);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        // Symmetrize away roundoff.
        for i in 0..n {
            for j in 0..i {
                let avg = (inv[i * n + j] + inv[j * n + i]) * T::lit(0.5);
                inv[i * n + j] = avg;
                inv[j * n + i] = avg;
            }
        }
        inv
    }

    /// Factor of the bordered matrix `[[A, c], [c^T, d]]`.
    pub fn append(&self, cross: &[T], diag: T) -> Option<Self> {
        let n = self.n;
        assert_eq!(cross.len(), n);
        let mut row = cross.to_vec();
        self.solve_lower_in_place(&mut row);
        let mut pivot = diag;
        for v in &row {
            pivot -= *v * *v;
        }
        if !(pivot > T::zero()) || !pivot.is_finite() {
            return None;
        }
        let m = n + 1;
        let mut l = vec![T::zero(); m * m];
        for i in 0..n {
            l[i * m..i * m + i + 1].copy_from_slice(&self.l[i * n..i * n + i + 1]);
        }
        l[n * m..n * m + n].copy_from_slice(&row);
        l[n * m + n] = pivot.sqrt();
        Some(Self { n: m, l })
    }
}
