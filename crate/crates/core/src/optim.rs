//! Box-constrained local ascent and low-discrepancy start points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidArgument("bounds must be non-empty and of equal length".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && l <= h)) {
            return Err(Error::InvalidArgument("each lower bound must not exceed its upper bound".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn unit(dim: usize) -> Self {
        Self { lo: vec![0.0; dim], hi: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    /// Maps a point of the unit cube into the box.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(u, (l, h))| l + u * (h - l))
            .collect()
    }
}

/// Scrambled Sobol points in the unit cube, `n` rows of dimension `dim`.
pub fn ld_points(n: usize, dim: usize, seed: u32) -> Vec<Vec<f64>> {
    assert!(dim as u32 <= sobol_burley::NUM_DIMENSIONS, "too many dimensions for Sobol sampler");
    (0..n)
        .map(|i| (0..dim).map(|d| sobol_burley::sample(i as u32, d as u32, seed) as f64).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AscentOptions {
    pub max_iters: usize,
    pub memory: usize,
    /// Stop when the projected gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step improves the value by less than this (relative).
    pub value_tol: f64,
    /// Cap on the first step's max-norm, before curvature information exists.
    pub initial_step: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self { max_iters: 50, memory: 6, grad_tol: 1e-7, value_tol: 1e-10, initial_step: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AscentResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected limited-memory quasi-Newton ascent of `f` over `bounds`.
///
/// `f(x, grad)` returns the value and writes the gradient, or `None` when the
/// point cannot be evaluated. Returns `None` only if the start is not finite.
pub fn maximize<F>(mut f: F, x0: &[f64], bounds: &Bounds, opts: &AscentOptions) -> Option<AscentResult>
where
    F: FnMut(&[f64], &mut [f64]) -> Option<f64>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    let mut evaluations = 1;
    let mut fx = match f(&x, &mut g) {
        Some(v) if v.is_finite() && g.iter().all(|v| v.is_finite()) => v,
        _ => return None,
    };

    // Work with the minimization of -f.
    let neg = |g: &mut [f64]| g.iter_mut().for_each(|v| *v = -*v);
    neg(&mut g);
    let mut val = -fx;

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0;
    let mut g_new = vec![0.0; n];
    let mut x_new = vec![0.0; n];

    while iterations < opts.max_iters {
        let free: Vec<bool> = (0..n)
            .map(|i| {
                let at_lo = x[i] <= bounds.lo[i] && g[i] > 0.0;
                let at_hi = x[i] >= bounds.hi[i] && g[i] < 0.0;
                !(at_lo || at_hi) && bounds.hi[i] > bounds.lo[i]
            })
            .collect();
        let pg_norm = (0..n).filter(|&i| free[i]).map(|i| g[i].abs()).fold(0.0, f64::max);
        if pg_norm < opts.grad_tol {
            break;
        }

        // Two-loop recursion on the free coordinates.
        let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(&free).map(|(a, f)| if *f { *a } else { 0.0 }).collect() };
        let mut q = mask(&g);
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        let mut rho = vec![0.0; m];
        for k in (0..m).rev() {
            let sk = mask(&s_hist[k]);
            let yk = mask(&y_hist[k]);
            let sy = dot(&sk, &yk);
            rho[k] = if sy > 1e-12 { 1.0 / sy } else { 0.0 };
            alpha[k] = rho[k] * dot(&sk, &q);
            q.iter_mut().zip(&yk).for_each(|(qi, yi)| *qi -= alpha[k] * yi);
        }
        if m > 0 {
            let sk = mask(&s_hist[m - 1]);
            let yk = mask(&y_hist[m - 1]);
            let yy = dot(&yk, &yk);
            if yy > 0.0 && dot(&sk, &yk) > 1e-12 {
                let gamma = dot(&sk, &yk) / yy;
                q.iter_mut().for_each(|v| *v *= gamma);
            }
        }
        for k in 0..m {
            let sk = mask(&s_hist[k]);
            let yk = mask(&y_hist[k]);
            let beta = rho[k] * dot(&yk, &q);
            q.iter_mut().zip(&sk).for_each(|(qi, si)| *qi += (alpha[k] - beta) * si);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&d, &g) >= 0.0 {
            d = mask(&g).iter().map(|v| -v).collect();
        }

        let d_inf = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if d_inf == 0.0 {
            break;
        }
        let mut step = if m == 0 { (opts.initial_step / d_inf).min(1.0) } else { 1.0 };

        let mut accepted = false;
        for _ in 0..30 {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            bounds.project(&mut x_new);
            let moved: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            if moved.iter().all(|v| *v == 0.0) {
                break;
            }
            evaluations += 1;
            if let Some(v) = f(&x_new, &mut g_new) {
                if v.is_finite() && g_new.iter().all(|v| v.is_finite()) {
                    let v_new = -v;
                    if v_new <= val + 1e-4 * dot(&g, &moved) {
                        neg(&mut g_new);
                        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                        if dot(&moved, &y) > 1e-12 {
                            if s_hist.len() == opts.memory {
                                s_hist.remove(0);
                                y_hist.remove(0);
                            }
                            s_hist.push(moved);
                            y_hist.push(y);
                        }
                        let improvement = val - v_new;
                        x.copy_from_slice(&x_new);
                        g.copy_from_slice(&g_new);
                        val = v_new;
                        fx = v;
                        accepted = true;
                        iterations += 1;
                        if improvement <= opts.value_tol * (1.0 + val.abs()) {
                            return Some(AscentResult { x, value: fx, iterations, evaluations });
                        }
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Some(AscentResult { x, value: fx, iterations, evaluations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn finds_interior_maximum() {
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = -2.0 * (x[0] - 0.3);
            g[1] = -8.0 * (x[1] - 0.7);
            Some(-(x[0] - 0.3).powi(2) - 4.0 * (x[1] - 0.7).powi(2))
        };
        let r = maximize(f, &[0.9, 0.1], &Bounds::unit(2), &AscentOptions::default()).unwrap();
        assert_relative_eq!(r.x[0], 0.3, epsilon = 1e-5);
        assert_relative_eq!(r.x[1], 0.7, epsilon = 1e-5);
    }

    #[test]
    fn stops_on_active_bound() {
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            g[1] = -2.0 * (x[1] - 0.5);
            Some(x[0] - (x[1] - 0.5).powi(2))
        };
        let r = maximize(f, &[0.2, 0.0], &Bounds::unit(2), &AscentOptions::default()).unwrap();
        assert_eq!(r.x[0], 1.0);
        assert_relative_eq!(r.x[1], 0.5, epsilon = 1e-5);
    }

    #[test]
    fn rosenbrock_progress() {
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -(-2.0 * (1.0 - a) - 400.0 * a * (b - a * a));
            g[1] = -(200.0 * (b - a * a));
            Some(-((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)))
        };
        let bounds = Bounds::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let opts = AscentOptions { max_iters: 500, ..Default::default() };
        let r = maximize(f, &[-1.2, 1.0], &bounds, &opts).unwrap();
        assert!(r.value > -1e-6, "value {}", r.value);
    }

    #[test]
    fn non_finite_start_is_rejected() {
        let f = |_: &[f64], _: &mut [f64]| None;
        assert!(maximize(f, &[0.5], &Bounds::unit(1), &AscentOptions::default()).is_none());
    }

    #[test]
    fn ld_points_are_deterministic_and_in_cube() {
        let a = ld_points(16, 3, 7);
        assert_eq!(a, ld_points(16, 3, 7));
        assert_ne!(a, ld_points(16, 3, 8));
        assert!(a.iter().flatten().all(|v| (0.0..1.0).contains(v)));
    }
}
