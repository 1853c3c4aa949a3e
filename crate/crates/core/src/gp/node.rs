//! Exact GP posterior over one input set with one or more target channels.
//!
//! Channels share the training inputs, hyperparameters and gram factor; each
//! channel carries its own target standardization and weight vector. A
//! single-channel node is an ordinary GP regressor.

use crate::error::{Error, Result};
use crate::gp::kernel::{kernel, kernel_with_grad, KernelHyperparams};
use crate::linalg::Cholesky;
use crate::scalar::Real;

/// Affine map of raw inputs onto the unit cube: `(x - offset) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputScaling<T> {
    pub offset: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Real> InputScaling<T> {
    pub fn identity(dim: usize) -> Self {
        Self { offset: vec![T::zero(); dim], scale: vec![T::one(); dim] }
    }

    pub fn from_bounds(lo: &[T], hi: &[T]) -> Self {
        let scale = lo
            .iter()
            .zip(hi)
            .map(|(l, h)| if *h > *l { *h - *l } else { T::one() })
            .collect();
        Self { offset: lo.to_vec(), scale }
    }

    /// Min/max of the data per dimension; constant dimensions keep scale 1.
    pub fn from_data(rows: &[Vec<T>]) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        let mut lo = vec![T::infinity(); dim];
        let mut hi = vec![T::neg_infinity(); dim];
        for r in rows {
            for j in 0..dim {
                lo[j] = lo[j].min(r[j]);
                hi[j] = hi[j].max(r[j]);
            }
        }
        Self::from_bounds(&lo, &hi)
    }

    /// Concatenation of two scalings, e.g. `x` dimensions followed by parent outputs.
    pub fn concat(&self, other: &Self) -> Self {
        let mut offset = self.offset.clone();
        offset.extend_from_slice(&other.offset);
        let mut scale = self.scale.clone();
        scale.extend_from_slice(&other.scale);
        Self { offset, scale }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn normalize(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        self.normalize_into(x, &mut out);
        out
    }

    #[inline]
    pub fn normalize_into(&self, x: &[T], out: &mut [T]) {
        for j in 0..x.len() {
            out[j] = (x[j] - self.offset[j]) / self.scale[j];
        }
    }
}

/// Per-channel target standardization `(y - offset) / scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetScaling<T> {
    pub offset: T,
    pub scale: T,
    /// All targets identical; the channel carries no information beyond its value.
    pub degenerate: bool,
}

impl<T: Real> TargetScaling<T> {
    pub fn identity() -> Self {
        Self { offset: T::zero(), scale: T::one(), degenerate: false }
    }

    pub fn from_values(ys: &[T]) -> Self {
        if ys.is_empty() {
            return Self::identity();
        }
        let n = T::from_usize(ys.len()).unwrap();
        let mean = ys.iter().copied().sum::<T>() / n;
        let var = ys.iter().map(|y| (*y - mean) * (*y - mean)).sum::<T>() / n;
        let sd = var.sqrt();
        let spread = ys.iter().fold(T::zero(), |a, y| a.max((*y - mean).abs()));
        if spread == T::zero() || !(sd > T::epsilon() * (T::one() + mean.abs())) {
            Self { offset: mean, scale: T::one(), degenerate: true }
        } else {
            Self { offset: mean, scale: sd, degenerate: false }
        }
    }

    #[inline]
    pub fn standardize(&self, y: T) -> T {
        (y - self.offset) / self.scale
    }

    #[inline]
    pub fn raw(&self, y: T) -> T {
        self.offset + self.scale * y
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Channel<T> {
    scaling: TargetScaling<T>,
    /// Standardized targets.
    y: Vec<T>,
    /// `K^{-1} (y - mean_const)`.
    alpha: Vec<T>,
}

/// Posterior summary at one query, raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGrad<T> {
    pub mean: T,
    pub variance: T,
    pub d_mean: Vec<T>,
    pub d_variance: Vec<T>,
}

/// Standardized-unit posterior at one query, with optional gradients with
/// respect to the normalized query. Reused across calls to avoid allocation.
#[derive(Clone, Debug, Default)]
pub struct NodeEval<T> {
    pub means: Vec<T>,
    pub variance: T,
    /// `channels x dim`, row-major.
    pub d_means: Vec<T>,
    pub d_variance: Vec<T>,
    k: Vec<T>,
    w: Vec<T>,
    dk: Vec<T>,
    qn: Vec<T>,
    tmp: Vec<T>,
}

/// Rank-one conditioning on a hypothetical observation at `u`, in the form
/// needed to evaluate the updated posterior without refactorizing:
/// `k_new(q) = k(q,u) - k(q)^T w_u`, `mean += k_new * shift`, `var -= k_new^2 / s2`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFantasy<T> {
    pub u: Vec<T>,
    pub w_u: Vec<T>,
    pub s2: T,
    /// `(y_std - mean_std(u)) / s2` per channel.
    pub shift: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateNode<T> {
    dim: usize,
    input_scaling: InputScaling<T>,
    hyper: KernelHyperparams<T>,
    /// Normalized training inputs, `n x dim` row-major.
    x: Vec<T>,
    n: usize,
    chol: Cholesky<T>,
    channels: Vec<Channel<T>>,
}

fn gram<T: Real>(x: &[T], n: usize, dim: usize, h: &KernelHyperparams<T>) -> Vec<T> {
    let mut k = vec![T::zero(); n * n];
    for i in 0..n {
        let xi = &x[i * dim..(i + 1) * dim];
        k[i * n + i] = h.signal_variance;
        for j in 0..i {
            let v = kernel(xi, &x[j * dim..(j + 1) * dim], h);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

impl<T: Real> SurrogateNode<T> {
    /// Node with no training data.
    pub fn prior(hyper: KernelHyperparams<T>, input_scaling: InputScaling<T>, n_channels: usize) -> Self {
        let channels = (0..n_channels)
            .map(|_| Channel { scaling: TargetScaling::identity(), y: Vec::new(), alpha: Vec::new() })
            .collect();
        Self { dim: hyper.dim(), input_scaling, hyper, x: Vec::new(), n: 0, chol: Cholesky::empty(), channels }
    }

    /// Conditions on raw `inputs` and per-channel raw `targets` under frozen
    /// hyperparameters. Targets are standardized per channel.
    pub fn condition(
        inputs: &[Vec<T>],
        targets: &[Vec<T>],
        input_scaling: InputScaling<T>,
        hyper: KernelHyperparams<T>,
    ) -> Result<Self> {
        let scalings: Vec<TargetScaling<T>> = targets.iter().map(|t| TargetScaling::from_values(t)).collect();
        Self::condition_scaled(inputs, targets, input_scaling, &scalings, hyper)
    }

    /// As [`condition`](Self::condition) with explicit target scalings.
    pub fn condition_scaled(
        inputs: &[Vec<T>],
        targets: &[Vec<T>],
        input_scaling: InputScaling<T>,
        scalings: &[TargetScaling<T>],
        hyper: KernelHyperparams<T>,
    ) -> Result<Self> {
        hyper.validate()?;
        let dim = hyper.dim();
        let n = inputs.len();
        if input_scaling.dim() != dim || inputs.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument(format!("inputs must have dimension {dim}")));
        }
        if targets.is_empty() || targets.iter().any(|t| t.len() != n) || scalings.len() != targets.len() {
            return Err(Error::InvalidArgument("each target channel needs one value per input".into()));
        }
        let mut x = Vec::with_capacity(n * dim);
        for r in inputs {
            x.extend(input_scaling.normalize(r));
        }
        let ys: Vec<Vec<T>> = targets
            .iter()
            .zip(scalings)
            .map(|(t, s)| t.iter().map(|y| s.standardize(*y)).collect())
            .collect();
        Self::from_normalized(x, n, ys, scalings.to_vec(), input_scaling, hyper)
    }

    pub(crate) fn from_normalized(
        x: Vec<T>,
        n: usize,
        ys: Vec<Vec<T>>,
        scalings: Vec<TargetScaling<T>>,
        input_scaling: InputScaling<T>,
        mut hyper: KernelHyperparams<T>,
    ) -> Result<Self> {
        let dim = hyper.dim();
        let chol = if n == 0 {
            Cholesky::empty()
        } else {
            let k = gram(&x, n, dim, &hyper);
            let (c, jitter) = Cholesky::factor_jittered(&k, n, hyper.noise_jitter, hyper.signal_variance)?;
            hyper.noise_jitter = jitter;
            c
        };
        let channels = ys
            .into_iter()
            .zip(scalings)
            .map(|(y, scaling)| {
                let centered: Vec<T> = y.iter().map(|v| *v - hyper.mean_const).collect();
                let alpha = chol.solve(&centered);
                Channel { scaling, y, alpha }
            })
            .collect();
        Ok(Self { dim, input_scaling, hyper, x, n, chol, channels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_train(&self) -> usize {
        self.n
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn hyper(&self) -> &KernelHyperparams<T> {
        &self.hyper
    }

    pub fn input_scaling(&self) -> &InputScaling<T> {
        &self.input_scaling
    }

    pub fn target_scaling(&self, channel: usize) -> TargetScaling<T> {
        self.channels[channel].scaling
    }

    /// True when every channel's targets are constant.
    pub fn is_degenerate(&self) -> bool {
        self.n > 0 && self.channels.iter().all(|c| c.scaling.degenerate)
    }

    /// Raw training inputs reconstructed from the normalized copy.
    pub fn train_inputs(&self) -> Vec<Vec<T>> {
        (0..self.n)
            .map(|i| {
                (0..self.dim)
                    .map(|j| self.input_scaling.offset[j] + self.input_scaling.scale[j] * self.x[i * self.dim + j])
                    .collect()
            })
            .collect()
    }

    /// Raw training targets of one channel.
    pub fn train_targets(&self, channel: usize) -> Vec<T> {
        let c = &self.channels[channel];
        c.y.iter().map(|y| c.scaling.raw(*y)).collect()
    }

    /// Exact log marginal likelihood of the standardized targets, summed over channels.
    pub fn log_marginal_likelihood(&self) -> T {
        let n = T::from_usize(self.n).unwrap();
        let half_log_det = self.chol.log_det() * T::lit(0.5);
        let log2pi = T::lit((2.0 * std::f64::consts::PI).ln());
        self.channels
            .iter()
            .map(|c| {
                let fit: T = c.y.iter().zip(&c.alpha).map(|(y, a)| (*y - self.hyper.mean_const) * *a).sum();
                -T::lit(0.5) * fit - half_log_det - T::lit(0.5) * n * log2pi
            })
            .sum()
    }

    /// Evaluates the standardized posterior at a raw query, optionally under a
    /// rank-one fantasy. Gradients (when requested) are with respect to the
    /// normalized query.
    pub fn eval_std(&self, q: &[T], fantasy: Option<&PointFantasy<T>>, grad: bool, out: &mut NodeEval<T>) {
        let (n, d) = (self.n, self.dim);
        let nc = self.channels.len();
        out.qn.resize(d, T::zero());
        self.input_scaling.normalize_into(q, &mut out.qn);
        out.k.resize(n, T::zero());
        out.means.clear();
        out.means.resize(nc, self.hyper.mean_const);
        if grad {
            out.dk.resize(n * d, T::zero());
            out.d_means.clear();
            out.d_means.resize(nc * d, T::zero());
            out.d_variance.clear();
            out.d_variance.resize(d, T::zero());
        }
        for i in 0..n {
            let xi = &self.x[i * d..(i + 1) * d];
            out.k[i] = if grad {
                kernel_with_grad(&out.qn, xi, &self.hyper, &mut out.dk[i * d..(i + 1) * d])
            } else {
                kernel(&out.qn, xi, &self.hyper)
            };
        }
        out.w.clear();
        out.w.extend_from_slice(&out.k);
        self.chol.solve_in_place(&mut out.w);
        let mut var = self.hyper.signal_variance;
        for i in 0..n {
            var -= out.k[i] * out.w[i];
        }
        for (c, ch) in self.channels.iter().enumerate() {
            let mut m = self.hyper.mean_const;
            for i in 0..n {
                m += out.k[i] * ch.alpha[i];
            }
            out.means[c] = m;
            if grad {
                for i in 0..n {
                    let a = ch.alpha[i];
                    for j in 0..d {
                        out.d_means[c * d + j] += a * out.dk[i * d + j];
                    }
                }
            }
        }
        if grad {
            for i in 0..n {
                let w2 = T::lit(-2.0) * out.w[i];
                for j in 0..d {
                    out.d_variance[j] += w2 * out.dk[i * d + j];
                }
            }
        }
        if let Some(f) = fantasy {
            out.tmp.resize(d, T::zero());
            let ku = if grad {
                kernel_with_grad(&out.qn, &f.u, &self.hyper, &mut out.tmp)
            } else {
                kernel(&out.qn, &f.u, &self.hyper)
            };
            let mut kn = ku;
            for i in 0..n {
                kn -= out.k[i] * f.w_u[i];
            }
            var -= kn * kn / f.s2;
            for c in 0..nc {
                out.means[c] += kn * f.shift[c];
            }
            if grad {
                // d kn / dq = dk(q,u) - sum_i w_u,i dk_i(q)
                for i in 0..n {
                    let wu = f.w_u[i];
                    for j in 0..d {
                        out.tmp[j] -= wu * out.dk[i * d + j];
                    }
                }
                let two_kn = T::lit(2.0) * kn / f.s2;
                for j in 0..d {
                    out.d_variance[j] -= two_kn * out.tmp[j];
                }
                for c in 0..nc {
                    for j in 0..d {
                        out.d_means[c * d + j] += out.tmp[j] * f.shift[c];
                    }
                }
            }
        }
        if var <= T::zero() {
            var = T::zero();
            if grad {
                out.d_variance.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        out.variance = var;
    }

    /// Posterior mean and variance of `channel` at a raw query, raw units.
    pub fn posterior_channel(&self, q: &[T], channel: usize) -> (T, T) {
        let mut e = NodeEval::default();
        self.eval_std(q, None, false, &mut e);
        let s = self.channels[channel].scaling;
        (s.raw(e.means[channel]), s.scale * s.scale * e.variance)
    }

    /// Posterior of the first channel.
    pub fn posterior(&self, q: &[T]) -> (T, T) {
        self.posterior_channel(q, 0)
    }

    /// Posterior and its gradient with respect to the raw query.
    pub fn posterior_grad(&self, q: &[T], channel: usize) -> PosteriorGrad<T> {
        let mut e = NodeEval::default();
        self.eval_std(q, None, true, &mut e);
        let s = self.channels[channel].scaling;
        let d = self.dim;
        let d_mean = (0..d).map(|j| s.scale * e.d_means[channel * d + j] / self.input_scaling.scale[j]).collect();
        let d_variance = (0..d).map(|j| s.scale * s.scale * e.d_variance[j] / self.input_scaling.scale[j]).collect();
        PosteriorGrad { mean: s.raw(e.means[channel]), variance: s.scale * s.scale * e.variance, d_mean, d_variance }
    }

    /// `mu(q) + sqrt(var(q)) * epsilon` for the first channel.
    pub fn sample_reparam(&self, q: &[T], epsilon: T) -> T {
        let (m, v) = self.posterior(q);
        m + v.sqrt() * epsilon
    }

    /// Reparametrized sample and its gradient with respect to the raw query.
    pub fn sample_reparam_grad(&self, q: &[T], epsilon: T) -> (T, Vec<T>) {
        let p = self.posterior_grad(q, 0);
        let sd = p.variance.sqrt();
        let g = if sd > T::zero() {
            p.d_mean.iter().zip(&p.d_variance).map(|(dm, dv)| *dm + epsilon * *dv / (T::lit(2.0) * sd)).collect()
        } else {
            p.d_mean.clone()
        };
        (p.mean + sd * epsilon, g)
    }

    /// Rank-one fantasy at raw input `u` with raw per-channel values `y`.
    pub fn point_fantasy(&self, u: &[T], y: &[T]) -> PointFantasy<T> {
        let mut e = NodeEval::default();
        self.eval_std(u, None, false, &mut e);
        let s2 = e.variance + self.hyper.noise_jitter;
        let shift = self
            .channels
            .iter()
            .zip(y)
            .enumerate()
            .map(|(c, (ch, yv))| (ch.scaling.standardize(*yv) - e.means[c]) / s2)
            .collect();
        PointFantasy { u: e.qn, w_u: e.w, s2, shift }
    }

    /// Node conditioned on one extra observation under frozen hyperparameters
    /// and target scalings.
    pub fn fantasize(&self, extra_input: &[T], extra_target: &[T]) -> Result<Self> {
        if extra_input.len() != self.dim || extra_target.len() != self.channels.len() {
            return Err(Error::InvalidArgument("fantasy point has wrong shape".into()));
        }
        let u = self.input_scaling.normalize(extra_input);
        let d = self.dim;
        let cross: Vec<T> = (0..self.n).map(|i| kernel(&u, &self.x[i * d..(i + 1) * d], &self.hyper)).collect();
        let diag = self.hyper.signal_variance + self.hyper.noise_jitter;
        let chol = self
            .chol
            .append(&cross, diag)
            .ok_or(Error::FactorizationFailure { jitter: self.hyper.noise_jitter.as_f64() })?;
        let mut x = self.x.clone();
        x.extend_from_slice(&u);
        let channels = self
            .channels
            .iter()
            .zip(extra_target)
            .map(|(ch, yv)| {
                let mut y = ch.y.clone();
                y.push(ch.scaling.standardize(*yv));
                let centered: Vec<T> = y.iter().map(|v| *v - self.hyper.mean_const).collect();
                let alpha = chol.solve(&centered);
                Channel { scaling: ch.scaling, y, alpha }
            })
            .collect();
        Ok(Self {
            dim: d,
            input_scaling: self.input_scaling.clone(),
            hyper: self.hyper.clone(),
            x,
            n: self.n + 1,
            chol,
            channels,
        })
    }

    /// Refits from scratch with the current data plus one point, under the
    /// same hyperparameters and scalings.
    pub fn refit_with(&self, extra_input: &[T], extra_target: &[T]) -> Result<Self> {
        let mut inputs = self.train_inputs();
        inputs.push(extra_input.to_vec());
        let targets: Vec<Vec<T>> = (0..self.channels.len())
            .map(|c| {
                let mut t = self.train_targets(c);
                t.push(extra_target[c]);
                t
            })
            .collect();
        let scalings: Vec<_> = self.channels.iter().map(|c| c.scaling).collect();
        Self::condition_scaled(&inputs, &targets, self.input_scaling.clone(), &scalings, self.hyper.clone())
    }
}
