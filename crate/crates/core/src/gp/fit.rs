//! Type-II maximum likelihood for the kernel hyperparameters.
//!
//! The search runs over `theta = [ln l_1 .. ln l_d, ln sigma_f, mean]` in
//! normalized units. Several datasets can share one set of hyperparameters;
//! their likelihoods multiply.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gp::kernel::{matern52, radial_slope, scaled_distance, KernelHyperparams};
use crate::gp::node::{InputScaling, SurrogateNode, TargetScaling};
use crate::linalg::{Cholesky, JITTER_START};
use crate::optim::{maximize, AscentOptions, Bounds};
use crate::scalar::Real;

/// One gram matrix's worth of data: normalized inputs and one or more
/// standardized target vectors sharing them.
#[derive(Clone, Debug, PartialEq)]
pub struct FitGroup<T> {
    /// `n x dim`, row-major.
    pub x: Vec<T>,
    pub n: usize,
    pub ys: Vec<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub log_lengthscale: (f64, f64),
    pub log_signal_sd: (f64, f64),
    pub mean: (f64, f64),
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iters: 60,
            log_lengthscale: (0.05f64.ln(), 10f64.ln()),
            log_signal_sd: (0.05f64.ln(), 20f64.ln()),
            mean: (-5.0, 5.0),
        }
    }
}

impl FitOptions {
    fn bounds(&self, dim: usize) -> Bounds {
        let mut lo = vec![self.log_lengthscale.0; dim];
        let mut hi = vec![self.log_lengthscale.1; dim];
        lo.push(self.log_signal_sd.0);
        hi.push(self.log_signal_sd.1);
        lo.push(self.mean.0);
        hi.push(self.mean.1);
        Bounds { lo, hi }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome<T> {
    pub hyper: KernelHyperparams<T>,
    pub log_likelihood: f64,
    /// Every target was constant; `hyper` is the minimal-variance prior.
    pub degenerate: bool,
}

pub fn theta_to_hyper<T: Real>(theta: &[f64]) -> KernelHyperparams<T> {
    let d = theta.len() - 2;
    let sf2 = (2.0 * theta[d]).exp();
    KernelHyperparams {
        lengthscales: theta[..d].iter().map(|v| T::lit(v.exp())).collect(),
        signal_variance: T::lit(sf2),
        mean_const: T::lit(theta[d + 1]),
        noise_jitter: T::lit(JITTER_START * sf2),
    }
}

pub fn hyper_to_theta<T: Real>(h: &KernelHyperparams<T>) -> Vec<f64> {
    let mut t: Vec<f64> = h.lengthscales.iter().map(|l| l.as_f64().ln()).collect();
    t.push(0.5 * h.signal_variance.as_f64().ln());
    t.push(h.mean_const.as_f64());
    t
}

/// Pooled log marginal likelihood and (optionally) its gradient in `theta`.
/// `None` when a gram matrix cannot be factorized.
pub fn pooled_log_likelihood<T: Real>(groups: &[FitGroup<T>], dim: usize, theta: &[f64], grad: Option<&mut [f64]>) -> Option<f64> {
    let h: KernelHyperparams<T> = theta_to_hyper(theta);
    let ls2: Vec<T> = h.lengthscales.iter().map(|l| *l * *l).collect();
    let mut total = 0.0;
    let mut g = vec![0.0; dim + 2];
    let want_grad = grad.is_some();
    let log2pi = (2.0 * std::f64::consts::PI).ln();
    for grp in groups {
        let n = grp.n;
        if n == 0 {
            continue;
        }
        let x = &grp.x;
        // Gram matrix with cached scaled distances for the gradient pass.
        let mut k = vec![T::zero(); n * n];
        let mut r = vec![T::zero(); n * n];
        for i in 0..n {
            k[i * n + i] = h.signal_variance;
            for j in 0..i {
                let rij = scaled_distance(&x[i * dim..(i + 1) * dim], &x[j * dim..(j + 1) * dim], &h.lengthscales);
                let v = h.signal_variance * matern52(rij);
                k[i * n + j] = v;
                k[j * n + i] = v;
                r[i * n + j] = rij;
            }
        }
        let (chol, jitter) = Cholesky::factor_jittered(&k, n, h.noise_jitter, h.signal_variance).ok()?;
        let half_log_det = 0.5 * chol.log_det().as_f64();
        let mut alphas = Vec::with_capacity(grp.ys.len());
        for y in &grp.ys {
            let centered: Vec<T> = y.iter().map(|v| *v - h.mean_const).collect();
            let alpha = chol.solve(&centered);
            let fit: f64 = centered.iter().zip(&alpha).map(|(c, a)| (*c * *a).as_f64()).sum();
            total += -0.5 * fit - half_log_det - 0.5 * n as f64 * log2pi;
            if want_grad {
                g[dim + 1] += alpha.iter().map(|a| a.as_f64()).sum::<f64>();
                // d/d ln sigma_f: tr(A K) with A = alpha alpha^T - K^{-1}, K including jitter.
                g[dim] += fit - n as f64;
            }
            alphas.push(alpha);
        }
        if want_grad {
            let inv = chol.inverse();
            let m = T::from_usize(grp.ys.len()).unwrap();
            let _ = jitter;
            for i in 0..n {
                for j in 0..i {
                    let mut a = -m * inv[i * n + j];
                    for al in &alphas {
                        a += al[i] * al[j];
                    }
                    let slope = radial_slope(r[i * n + j], h.signal_variance);
                    // Symmetric pair counted twice, times the 1/2 of the trace formula.
                    let w = a * slope;
                    for l in 0..dim {
                        let diff = x[i * dim + l] - x[j * dim + l];
                        g[l] += (w * diff * diff / ls2[l]).as_f64();
                    }
                }
            }
        }
    }
    if let Some(out) = grad {
        out.copy_from_slice(&g);
    }
    if total.is_finite() {
        Some(total)
    } else {
        None
    }
}

/// Pooled MLE over `groups`. Restarts: the warm start (if any) or the
/// default hyperparameters first, then uniform draws from the search box.
pub fn fit_pooled<T: Real>(
    groups: &[FitGroup<T>],
    dim: usize,
    opts: &FitOptions,
    seed: u64,
    warm_start: Option<&KernelHyperparams<T>>,
) -> Result<FitOutcome<T>> {
    let n_total: usize = groups.iter().map(|g| g.n).sum();
    if n_total == 0 {
        return Err(Error::InvalidArgument("no training data to fit".into()));
    }
    let all_constant = groups.iter().all(|g| {
        g.ys.iter().all(|y| y.iter().all(|v| (*v - y[0]).abs() == T::zero()))
    });
    if all_constant {
        let first = groups.iter().find(|g| g.n > 0).map(|g| g.ys[0][0]).unwrap_or(T::zero());
        let mut theta = vec![0.0; dim + 2];
        theta[dim] = opts.log_signal_sd.0;
        theta[dim + 1] = first.as_f64();
        let mut hyper: KernelHyperparams<T> = theta_to_hyper(&theta);
        hyper.mean_const = first;
        let ll = pooled_log_likelihood(groups, dim, &theta, None).unwrap_or(f64::NEG_INFINITY);
        return Ok(FitOutcome { hyper, log_likelihood: ll, degenerate: true });
    }

    let bounds = opts.bounds(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = Vec::with_capacity(opts.restarts.max(1));
    let mut first = match warm_start {
        Some(h) if h.dim() == dim => hyper_to_theta(h),
        _ => hyper_to_theta(&KernelHyperparams::<f64>::default_for(dim)),
    };
    bounds.project(&mut first);
    starts.push(first);
    while starts.len() < opts.restarts.max(1) {
        let t: Vec<f64> = bounds.lo.iter().zip(&bounds.hi).map(|(l, h)| rng.gen_range(*l..=*h)).collect();
        starts.push(t);
    }

    let ascent = AscentOptions { max_iters: opts.max_iters, grad_tol: 1e-5, value_tol: 1e-9, initial_step: 1.0, ..Default::default() };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in &starts {
        let res = maximize(|t, g| pooled_log_likelihood(groups, dim, t, Some(g)), s, &bounds, &ascent);
        if let Some(r) = res {
            if best.as_ref().map_or(true, |(_, v)| r.value > *v) {
                best = Some((r.x, r.value));
            }
        }
    }
    let (theta, ll) = best.ok_or(Error::FactorizationFailure { jitter: crate::linalg::JITTER_CAP })?;
    Ok(FitOutcome { hyper: theta_to_hyper(&theta), log_likelihood: ll, degenerate: false })
}

/// Fits hyperparameters for one dataset in raw units: inputs are scaled by
/// `input_scaling`, targets standardized, then [`fit_pooled`] runs.
pub fn fit_mle<T: Real>(
    inputs: &[Vec<T>],
    targets: &[T],
    input_scaling: &InputScaling<T>,
    restarts: usize,
    seed: u64,
) -> Result<FitOutcome<T>> {
    if inputs.len() < 2 || inputs.len() != targets.len() {
        return Err(Error::InvalidArgument("need at least two (input, target) pairs".into()));
    }
    let dim = input_scaling.dim();
    let scaling = TargetScaling::from_values(targets);
    let group = FitGroup {
        x: inputs.iter().flat_map(|r| input_scaling.normalize(r)).collect(),
        n: inputs.len(),
        ys: vec![targets.iter().map(|y| scaling.standardize(*y)).collect()],
    };
    let opts = FitOptions { restarts, ..Default::default() };
    fit_pooled(std::slice::from_ref(&group), dim, &opts, seed, None)
}

/// Fits and conditions a single-channel node in one call.
pub fn fit_node<T: Real>(
    inputs: &[Vec<T>],
    targets: &[T],
    input_scaling: InputScaling<T>,
    restarts: usize,
    seed: u64,
) -> Result<SurrogateNode<T>> {
    let fit = fit_mle(inputs, targets, &input_scaling, restarts, seed)?;
    SurrogateNode::condition(inputs, &[targets.to_vec()], input_scaling, fit.hyper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_group() -> FitGroup<f64> {
        let xs = [0.05, 0.2, 0.45, 0.7, 0.9];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| (6.0 * x).sin()).collect();
        let s = TargetScaling::from_values(&ys);
        FitGroup { x: xs.to_vec(), n: 5, ys: vec![ys.iter().map(|y| s.standardize(*y)).collect()] }
    }

    #[test]
    fn likelihood_matches_node() {
        let grp = toy_group();
        let theta = [0.3f64.ln(), 0.2, 0.1];
        let ll = pooled_log_likelihood(std::slice::from_ref(&grp), 1, &theta, None).unwrap();
        let h: KernelHyperparams<f64> = theta_to_hyper(&theta);
        let rows: Vec<Vec<f64>> = grp.x.iter().map(|v| vec![*v]).collect();
        let node = SurrogateNode::condition_scaled(&rows, &grp.ys, InputScaling::identity(1), &[TargetScaling::identity()], h).unwrap();
        assert_relative_eq!(ll, node.log_marginal_likelihood(), epsilon = 1e-10);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut grp = toy_group();
        grp.ys.push(grp.ys[0].iter().map(|v| 0.5 * v + 0.1).collect());
        let two_d = FitGroup {
            x: vec![0.1, 0.9, 0.4, 0.3, 0.8, 0.5, 0.2, 0.1, 0.6, 0.7],
            n: 5,
            ys: vec![vec![0.3, -1.0, 0.4, 1.2, -0.9]],
        };
        for (groups, dim) in [(vec![grp], 1usize), (vec![two_d], 2)] {
            let mut theta = vec![0.25f64.ln(); dim];
            theta.push(0.3);
            theta.push(-0.2);
            let mut g = vec![0.0; dim + 2];
            pooled_log_likelihood(&groups, dim, &theta, Some(&mut g)).unwrap();
            for p in 0..dim + 2 {
                let h = 1e-6;
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[p] += h;
                tm[p] -= h;
                let fd = (pooled_log_likelihood(&groups, dim, &tp, None).unwrap()
                    - pooled_log_likelihood(&groups, dim, &tm, None).unwrap())
                    / (2.0 * h);
                assert_relative_eq!(g[p], fd, max_relative = 1e-4, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn constant_targets_are_degenerate() {
        let rows = vec![vec![0.1], vec![0.4], vec![0.8]];
        let out = fit_mle(&rows, &[2.5, 2.5, 2.5], &InputScaling::identity(1), 4, 0).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.hyper.mean_const, 0.0);
        let node = SurrogateNode::condition(&rows, &[vec![2.5; 3]], InputScaling::identity(1), out.hyper).unwrap();
        assert_relative_eq!(node.posterior(&[0.5]).0, 2.5, epsilon = 1e-12);
        assert_relative_eq!(node.hyper().signal_variance, 0.05f64.powi(2), max_relative = 1e-12);
    }

    #[test]
    fn fit_is_deterministic() {
        let rows = vec![vec![0.1], vec![0.4], vec![0.8], vec![0.95]];
        let ys = [0.2, 1.0, -0.3, 0.0];
        let a = fit_mle(&rows, &ys, &InputScaling::identity(1), 4, 11).unwrap();
        let b = fit_mle(&rows, &ys, &InputScaling::identity(1), 4, 11).unwrap();
        assert_eq!(a, b);
    }
}
