//! Knowledge-gradient estimators under a frozen sample bank.
//!
//! `alpha(x, z) = s(z) * ((1/K) sum_k max_x' u_{n+1,k}(x') - u*_n)`, where
//! fantasy `k` conditions the compartments selected by `z` on a sampled
//! output at `x`, `u` is the sample-average expected metric, and `u*_n` is
//! the current maximum, computed once per bank. The decoupling scale is
//! `s(z) = m / |z|` for `m` compartments, so `s(1) = 1` and the decoupled
//! estimate at `z = 1` is the coupled one.

use rayon::prelude::*;

use crate::acquisition::bank::BaseSampleBank;
use crate::error::{Error, Result};
use crate::funcnet::{InnerDraws, MetricTargets, NetworkFantasy, NetworkSurrogate};
use crate::gp::{NodeEval, PointFantasy, SurrogateNode};
use crate::optim::{maximize, AscentOptions, Bounds};

/// A posterior-expected objective over `x` that can be conditioned on a
/// fantasy observation.
pub trait InnerObjective: Sync {
    type Fantasy: Send + Sync;

    fn dim(&self) -> usize;

    /// Number of separately conditionable output groups (compartments).
    fn n_groups(&self) -> usize;

    /// Draws per inner sample.
    fn n_nodes(&self) -> usize;

    /// Groups that actually carry a surrogate; conditioning the others is a
    /// no-op and they do not count toward the decoupling scale.
    fn active_groups(&self) -> Vec<bool> {
        vec![true; self.n_groups()]
    }

    /// Whether evaluation needs the full draw tensors rather than moments.
    fn needs_draws(&self) -> bool;

    /// Sample-average expected objective at `x`, with gradient if requested.
    fn value(&self, x: &[f64], draws: &InnerDraws, fantasy: Option<&Self::Fantasy>, grad: Option<&mut [f64]>) -> f64;

    /// Conditioning of the groups selected by `z` on the output sampled at
    /// `x` with base draws `eps`.
    fn fantasy(&self, x: &[f64], eps: &[f64], z: &[bool]) -> Self::Fantasy;
}

/// Graybox objective: expected metric through the network surrogate.
pub struct NetworkObjective<'a> {
    pub surrogate: &'a NetworkSurrogate,
    pub targets: &'a MetricTargets,
}

impl InnerObjective for NetworkObjective<'_> {
    type Fantasy = NetworkFantasy;

    fn dim(&self) -> usize {
        self.surrogate.dim()
    }

    fn n_groups(&self) -> usize {
        self.surrogate.n_compartments()
    }

    fn n_nodes(&self) -> usize {
        self.surrogate.n_nodes()
    }

    fn needs_draws(&self) -> bool {
        !self.surrogate.is_factorized()
    }

    fn active_groups(&self) -> Vec<bool> {
        (0..self.n_groups()).map(|c| self.surrogate.is_modeled(c)).collect()
    }

    fn value(&self, x: &[f64], draws: &InnerDraws, fantasy: Option<&NetworkFantasy>, grad: Option<&mut [f64]>) -> f64 {
        self.surrogate.expected_metric(self.targets, x, draws, fantasy, grad)
    }

    fn fantasy(&self, x: &[f64], eps: &[f64], z: &[bool]) -> NetworkFantasy {
        self.surrogate.make_fantasy(x, eps, z)
    }
}

/// Blackbox objective: one GP on the scalar objective, metric = identity.
pub struct BlackboxObjective<'a> {
    pub node: &'a SurrogateNode<f64>,
    /// Reported group count, so decisions carry a full-length `z`.
    pub groups: usize,
}

impl InnerObjective for BlackboxObjective<'_> {
    type Fantasy = PointFantasy<f64>;

    fn dim(&self) -> usize {
        self.node.dim()
    }

    fn n_groups(&self) -> usize {
        self.groups
    }

    fn n_nodes(&self) -> usize {
        1
    }

    fn needs_draws(&self) -> bool {
        false
    }

    fn value(&self, x: &[f64], draws: &InnerDraws, fantasy: Option<&PointFantasy<f64>>, grad: Option<&mut [f64]>) -> f64 {
        let mut ev = NodeEval::default();
        let want = grad.is_some();
        self.node.eval_std(x, fantasy, want, &mut ev);
        let s = self.node.target_scaling(0);
        let sd = ev.variance.sqrt();
        let m1 = draws.m1[0];
        if let Some(g) = grad {
            let scale = &self.node.input_scaling().scale;
            for k in 0..g.len() {
                let dsd = if sd > 0.0 { ev.d_variance[k] / (2.0 * sd) } else { 0.0 };
                g[k] = s.scale * (ev.d_means[k] + m1 * dsd) / scale[k];
            }
        }
        s.raw(ev.means[0]) + s.scale * sd * m1
    }

    fn fantasy(&self, x: &[f64], eps: &[f64], _z: &[bool]) -> PointFantasy<f64> {
        let (m, v) = self.node.posterior(x);
        self.node.point_fantasy(x, &[m + v.sqrt() * eps[0]])
    }
}

/// Feasible set of the inner maximization.
#[derive(Clone, Debug, PartialEq)]
pub enum InnerDomain {
    /// Multi-start local ascent over a box.
    Continuous { bounds: Bounds, opts: AscentOptions },
    /// Enumeration of a finite candidate set.
    Discrete(Vec<Vec<f64>>),
}

impl InnerDomain {
    pub fn unit(dim: usize, max_iters: usize) -> Self {
        Self::Continuous { bounds: Bounds::unit(dim), opts: AscentOptions { max_iters, ..Default::default() } }
    }
}

/// Maximizes `obj.value` over `domain`. Ties keep the earliest start.
pub fn inner_maximize<O: InnerObjective>(
    obj: &O,
    draws: &InnerDraws,
    fantasy: Option<&O::Fantasy>,
    domain: &InnerDomain,
    starts: &[&[f64]],
) -> Result<(f64, Vec<f64>)> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut consider = |v: f64, x: Vec<f64>| {
        if v.is_finite() && best.as_ref().map_or(true, |(b, _)| v > *b) {
            best = Some((v, x));
        }
    };
    match domain {
        InnerDomain::Discrete(points) => {
            for p in points {
                consider(obj.value(p, draws, fantasy, None), p.clone());
            }
        }
        InnerDomain::Continuous { bounds, opts } => {
            for s in starts {
                let f = |x: &[f64], g: &mut [f64]| Some(obj.value(x, draws, fantasy, Some(g)));
                if let Some(r) = maximize(f, s, bounds, opts) {
                    consider(r.value, r.x);
                }
            }
        }
    }
    best.ok_or(Error::InnerOptFailure)
}

/// The current maximum expected objective `u*_n` and its location.
#[derive(Clone, Debug, PartialEq)]
pub struct Baseline {
    pub value: f64,
    pub x_star: Vec<f64>,
}

/// Computes `u*_n` from the bank's inner starts plus `incumbent`.
pub fn baseline<O: InnerObjective>(
    obj: &O,
    bank: &BaseSampleBank,
    domain: &InnerDomain,
    incumbent: Option<&[f64]>,
) -> Result<Baseline> {
    let mut starts: Vec<&[f64]> = bank.inner_starts.iter().map(Vec::as_slice).collect();
    if let Some(inc) = incumbent {
        starts.push(inc);
    }
    let (value, x_star) = inner_maximize(obj, &bank.inner, None, domain, &starts)?;
    Ok(Baseline { value, x_star })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KgEstimate {
    pub value: f64,
    /// `m / |z|`.
    pub scale: f64,
    pub baseline: f64,
    /// `max_x' u_{n+1,k}(x')` per fantasy.
    pub fantasy_values: Vec<f64>,
    pub maximizers: Vec<Vec<f64>>,
}

impl KgEstimate {
    /// Monte-Carlo standard error over the outer fantasies.
    pub fn standard_error(&self) -> f64 {
        let k = self.fantasy_values.len() as f64;
        if k < 2.0 {
            return f64::NAN;
        }
        let mean = self.fantasy_values.iter().sum::<f64>() / k;
        let var = self.fantasy_values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
        self.scale * (var / k).sqrt()
    }
}

/// `m / |z|` counted over active groups.
pub fn decoupling_scale(z: &[bool], active: &[bool]) -> Result<f64> {
    let m = active.iter().filter(|a| **a).count();
    let ones = z.iter().zip(active).filter(|(v, a)| **v && **a).count();
    if ones == 0 {
        return Err(Error::ZeroZ);
    }
    Ok(m as f64 / ones as f64)
}

/// Decoupled knowledge gradient at `x` for subset `z`.
pub fn dg_estimate<O: InnerObjective>(
    obj: &O,
    x: &[f64],
    z: &[bool],
    bank: &BaseSampleBank,
    base: &Baseline,
    domain: &InnerDomain,
) -> Result<KgEstimate> {
    let scale = decoupling_scale(z, &obj.active_groups())?;
    let per_k: Vec<(f64, Vec<f64>)> = (0..bank.k())
        .into_par_iter()
        .map(|k| {
            let fantasy = obj.fantasy(x, bank.outer_sample(k), z);
            let mut starts: Vec<&[f64]> = bank.inner_starts.iter().map(Vec::as_slice).collect();
            starts.push(&base.x_star);
            starts.push(x);
            inner_maximize(obj, &bank.inner, Some(&fantasy), domain, &starts)
        })
        .collect::<Result<Vec<_>>>()?;
    let (fantasy_values, maximizers): (Vec<f64>, Vec<Vec<f64>>) = per_k.into_iter().unzip();
    let mean = fantasy_values.iter().sum::<f64>() / fantasy_values.len() as f64;
    Ok(KgEstimate { value: scale * (mean - base.value), scale, baseline: base.value, fantasy_values, maximizers })
}

/// Coupled knowledge gradient: every group conditioned.
pub fn kg_estimate<O: InnerObjective>(
    obj: &O,
    x: &[f64],
    bank: &BaseSampleBank,
    base: &Baseline,
    domain: &InnerDomain,
) -> Result<KgEstimate> {
    dg_estimate(obj, x, &vec![true; obj.n_groups()], bank, base, domain)
}

/// Gradient of the estimate in `x` with each fantasy's maximizer held fixed
/// (envelope theorem), by central differences through the fantasy.
pub fn envelope_gradient<O: InnerObjective>(
    obj: &O,
    x: &[f64],
    z: &[bool],
    bank: &BaseSampleBank,
    est: &KgEstimate,
    bounds: &Bounds,
) -> Vec<f64> {
    const H: f64 = 1e-6;
    let dim = x.len();
    let k_count = bank.k() as f64;
    (0..dim)
        .map(|j| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] = (x[j] + H).min(bounds.hi[j]);
            xm[j] = (x[j] - H).max(bounds.lo[j]);
            let span = xp[j] - xm[j];
            if span <= 0.0 {
                return 0.0;
            }
            // Collected before summing so the result does not depend on thread scheduling.
            let total: f64 = (0..bank.k())
                .into_par_iter()
                .map(|k| {
                    let eps = bank.outer_sample(k);
                    let fp = obj.fantasy(&xp, eps, z);
                    let fm = obj.fantasy(&xm, eps, z);
                    let xs = &est.maximizers[k];
                    obj.value(xs, &bank.inner, Some(&fp), None) - obj.value(xs, &bank.inner, Some(&fm), None)
                })
                .collect::<Vec<f64>>()
                .iter()
                .sum();
            est.scale * total / (k_count * span)
        })
        .collect()
}
