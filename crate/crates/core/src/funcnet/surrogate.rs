//! Per-compartment, per-time GP surrogates arranged along a function network.
//!
//! Each compartment is modeled at every observed time index with pooled
//! hyperparameters. In composite mode a compartment's time nodes all take
//! `x` alone, so they share one gram factor and are stored as one
//! multi-channel node. In network mode a compartment with parents takes
//! `x` plus the parents' values at the same time index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcnet::topology::FunctionNetwork;
use crate::gp::{fit_pooled, FitGroup, FitOptions, InputScaling, KernelHyperparams, NodeEval, PointFantasy, SurrogateNode, TargetScaling};
use crate::metrics::ObservationSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurrogateMode {
    /// Nodes see `x` only; inter-compartment edges are ignored.
    CompositeOnly,
    /// Nodes see `x` and their parents' outputs.
    FullNetwork,
}

/// One simulator query: input in the unit cube and outputs indexed
/// `[compartment][time]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryPoint {
    pub x: Vec<f64>,
    pub outputs: Vec<Vec<f64>>,
}

/// Observed targets `d[compartment][time]` and the per-time normalizer.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTargets {
    pub d: Vec<Vec<Option<f64>>>,
    pub t_norm: f64,
}

impl MetricTargets {
    pub fn new(d: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let n_times = d.first().map_or(0, Vec::len);
        if d.iter().any(|row| row.len() != n_times) {
            return Err(Error::InvalidArgument("ragged target matrix".into()));
        }
        let t_norm = (0..n_times).filter(|&t| d.iter().any(|row| row[t].is_some())).count();
        if t_norm == 0 {
            return Err(Error::EmptyMask(0));
        }
        Ok(Self { d, t_norm: t_norm as f64 })
    }

    pub fn from_observations(obs: &ObservationSet<f64>) -> Result<Self> {
        let n_c = crate::ode::N_COMPARTMENTS;
        let d = (0..n_c).map(|c| (0..obs.len()).map(|t| obs.value(t, c)).collect()).collect();
        Self::new(d)
    }

    pub fn n_compartments(&self) -> usize {
        self.d.len()
    }

    pub fn n_times(&self) -> usize {
        self.d.first().map_or(0, Vec::len)
    }

    pub fn observed_compartments(&self) -> Vec<bool> {
        self.d.iter().map(|row| row.iter().any(Option::is_some)).collect()
    }

    /// `-(1/T) sum (d - y)^2` over observed entries of `y[c * T + t]`.
    pub fn score(&self, y: &[f64]) -> f64 {
        let nt = self.n_times();
        let mut s = 0.0;
        for (c, row) in self.d.iter().enumerate() {
            for (t, d) in row.iter().enumerate() {
                if let Some(d) = d {
                    let r = d - y[c * nt + t];
                    s += r * r;
                }
            }
        }
        -s / self.t_norm
    }
}

#[derive(Clone, Debug, PartialEq)]
enum CompartmentModel {
    /// One node, one channel per time index.
    Shared(SurrogateNode<f64>),
    /// One single-channel node per time index.
    PerTime(Vec<SurrogateNode<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
enum CompartmentFantasy {
    Shared(PointFantasy<f64>),
    PerTime(Vec<PointFantasy<f64>>),
}

/// Rank-one conditioning of selected compartments on one hypothetical query.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkFantasy {
    comps: Vec<Option<CompartmentFantasy>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSettings {
    pub options: FitOptions,
    pub seed: u64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self { options: FitOptions::default(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSurrogate {
    mode: SurrogateMode,
    network: FunctionNetwork,
    dim: usize,
    n_times: usize,
    order: Vec<usize>,
    models: Vec<Option<CompartmentModel>>,
    hypers: Vec<Option<KernelHyperparams<f64>>>,
    degenerate: Vec<bool>,
}

/// Draws and their first two moments, laid out `[sample][compartment * T + time]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerDraws {
    pub n_samples: usize,
    pub n_nodes: usize,
    /// Empty when only the moments were retained.
    pub draws: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
}

impl InnerDraws {
    pub fn from_draws(draws: Vec<f64>, n_samples: usize, n_nodes: usize, keep: bool) -> Self {
        assert_eq!(draws.len(), n_samples * n_nodes);
        let mut m1 = vec![0.0; n_nodes];
        let mut m2 = vec![0.0; n_nodes];
        for l in 0..n_samples {
            for j in 0..n_nodes {
                let e = draws[l * n_nodes + j];
                m1[j] += e;
                m2[j] += e * e;
            }
        }
        let inv = 1.0 / n_samples as f64;
        m1.iter_mut().for_each(|v| *v *= inv);
        m2.iter_mut().for_each(|v| *v *= inv);
        Self { n_samples, n_nodes, draws: if keep { draws } else { Vec::new() }, m1, m2 }
    }

    pub fn sample(&self, l: usize) -> &[f64] {
        &self.draws[l * self.n_nodes..(l + 1) * self.n_nodes]
    }
}

/// Which compartments need surrogates for the given mode and network.
pub fn modeled_compartments(network: &FunctionNetwork, mode: SurrogateMode) -> Vec<bool> {
    match mode {
        SurrogateMode::CompositeOnly => network.metric_edges().to_vec(),
        SurrogateMode::FullNetwork => network.metric_ancestors(),
    }
}

fn fit_compartment(
    history: &[HistoryPoint],
    network: &FunctionNetwork,
    mode: SurrogateMode,
    c: usize,
    n_times: usize,
    settings: &FitSettings,
    warm: Option<&KernelHyperparams<f64>>,
) -> Result<(CompartmentModel, KernelHyperparams<f64>, bool)> {
    let dim = history[0].x.len();
    let n = history.len();
    let seed = settings.seed.wrapping_add(1_000_003 * c as u64);
    let uses_parents = mode == SurrogateMode::FullNetwork && !network.parents(c).is_empty();
    if !uses_parents {
        let inputs: Vec<Vec<f64>> = history.iter().map(|h| h.x.clone()).collect();
        let targets: Vec<Vec<f64>> = (0..n_times).map(|t| history.iter().map(|h| h.outputs[c][t]).collect()).collect();
        let scalings: Vec<TargetScaling<f64>> = targets.iter().map(|t| TargetScaling::from_values(t)).collect();
        let group = FitGroup {
            x: inputs.iter().flatten().copied().collect(),
            n,
            ys: targets.iter().zip(&scalings).map(|(t, s)| t.iter().map(|y| s.standardize(*y)).collect()).collect(),
        };
        let fit = fit_pooled(std::slice::from_ref(&group), dim, &settings.options, seed, warm)?;
        let node = SurrogateNode::condition_scaled(&inputs, &targets, InputScaling::identity(dim), &scalings, fit.hyper.clone())?;
        return Ok((CompartmentModel::Shared(node), fit.hyper, fit.degenerate));
    }
    let parents = network.parents(c);
    let full_dim = dim + parents.len();
    let mut groups = Vec::with_capacity(n_times);
    let mut per_t = Vec::with_capacity(n_times);
    for t in 0..n_times {
        let inputs: Vec<Vec<f64>> = history
            .iter()
            .map(|h| {
                let mut r = h.x.clone();
                r.extend(parents.iter().map(|&p| h.outputs[p][t]));
                r
            })
            .collect();
        let parent_rows: Vec<Vec<f64>> = inputs.iter().map(|r| r[dim..].to_vec()).collect();
        let scaling = InputScaling::identity(dim).concat(&InputScaling::from_data(&parent_rows));
        let targets: Vec<f64> = history.iter().map(|h| h.outputs[c][t]).collect();
        let ts = TargetScaling::from_values(&targets);
        groups.push(FitGroup {
            x: inputs.iter().flat_map(|r| scaling.normalize(r)).collect(),
            n,
            ys: vec![targets.iter().map(|y| ts.standardize(*y)).collect()],
        });
        per_t.push((inputs, targets, scaling, ts));
    }
    let warm = warm.filter(|h| h.dim() == full_dim);
    let fit = fit_pooled(&groups, full_dim, &settings.options, seed, warm)?;
    let nodes = per_t
        .into_iter()
        .map(|(inputs, targets, scaling, ts)| SurrogateNode::condition_scaled(&inputs, &[targets], scaling, &[ts], fit.hyper.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok((CompartmentModel::PerTime(nodes), fit.hyper, fit.degenerate))
}

impl NetworkSurrogate {
    /// Fits every needed compartment. `warm` supplies per-compartment starting
    /// hyperparameters for the likelihood search.
    pub fn fit(
        history: &[HistoryPoint],
        network: &FunctionNetwork,
        mode: SurrogateMode,
        settings: &FitSettings,
        warm: Option<&[Option<KernelHyperparams<f64>>]>,
    ) -> Result<Self> {
        if history.len() < 2 {
            return Err(Error::InvalidArgument("need at least two history entries".into()));
        }
        let n_c = network.n_nodes();
        let dim = history[0].x.len();
        let n_times = history[0].outputs.first().map_or(0, Vec::len);
        for h in history {
            if h.x.len() != dim || h.outputs.len() != n_c || h.outputs.iter().any(|o| o.len() != n_times) {
                return Err(Error::InvalidArgument("history entries have inconsistent shapes".into()));
            }
        }
        let modeled = modeled_compartments(network, mode);
        let fitted: Vec<Option<(CompartmentModel, KernelHyperparams<f64>, bool)>> = (0..n_c)
            .into_par_iter()
            .map(|c| {
                if !modeled[c] {
                    return Ok(None);
                }
                let w = warm.and_then(|w| w.get(c)).and_then(|h| h.as_ref());
                fit_compartment(history, network, mode, c, n_times, settings, w).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut models = Vec::with_capacity(n_c);
        let mut hypers = Vec::with_capacity(n_c);
        let mut degenerate = Vec::with_capacity(n_c);
        for f in fitted {
            match f {
                Some((m, h, d)) => {
                    models.push(Some(m));
                    hypers.push(Some(h));
                    degenerate.push(d);
                }
                None => {
                    models.push(None);
                    hypers.push(None);
                    degenerate.push(false);
                }
            }
        }
        Ok(Self { mode, network: network.clone(), dim, n_times, order: network.topological_order()?, models, hypers, degenerate })
    }

    pub fn mode(&self) -> SurrogateMode {
        self.mode
    }

    pub fn network(&self) -> &FunctionNetwork {
        &self.network
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_compartments(&self) -> usize {
        self.network.n_nodes()
    }

    /// Number of `(compartment, time)` nodes, modeled or not.
    pub fn n_nodes(&self) -> usize {
        self.n_compartments() * self.n_times
    }

    pub fn is_modeled(&self, c: usize) -> bool {
        self.models[c].is_some()
    }

    pub fn hyperparameters(&self) -> &[Option<KernelHyperparams<f64>>] {
        &self.hypers
    }

    /// Compartments whose training targets were constant.
    pub fn degenerate(&self) -> &[bool] {
        &self.degenerate
    }

    /// Input dimension of compartment `c`'s nodes.
    pub fn node_input_dim(&self, c: usize) -> Option<usize> {
        match self.models[c].as_ref()? {
            CompartmentModel::Shared(n) => Some(n.dim()),
            CompartmentModel::PerTime(ns) => ns.first().map(|n| n.dim()),
        }
    }

    /// True when every modeled compartment's nodes depend on `x` only, so the
    /// per-node samples are conditionally independent.
    pub fn is_factorized(&self) -> bool {
        self.models.iter().all(|m| !matches!(m, Some(CompartmentModel::PerTime(_))))
    }

    /// Posterior mean and variance of node `(c, t)` at `x` with parents fixed
    /// at `parent_values` (ignored for nodes without parents).
    pub fn node_posterior(&self, c: usize, t: usize, x: &[f64], parent_values: &[f64]) -> Option<(f64, f64)> {
        match self.models[c].as_ref()? {
            CompartmentModel::Shared(n) => Some(n.posterior_channel(x, t)),
            CompartmentModel::PerTime(ns) => {
                let mut q = x.to_vec();
                q.extend_from_slice(parent_values);
                Some(ns[t].posterior(&q))
            }
        }
    }

    /// Reparametrized forward pass through the network.
    ///
    /// `eps[c * T + t]` drives node `(c, t)`. Outputs go to `y` in the same
    /// layout (NaN for unmodeled compartments); with `dy` present, the total
    /// derivative of each output with respect to `x` is written to
    /// `dy[(c * T + t) * D ..]`.
    pub fn sample_into(
        &self,
        x: &[f64],
        eps: &[f64],
        fantasy: Option<&NetworkFantasy>,
        y: &mut [f64],
        mut dy: Option<&mut [f64]>,
    ) {
        let (nt, dim) = (self.n_times, self.dim);
        let grad = dy.is_some();
        let mut ev = NodeEval::default();
        let mut q = Vec::with_capacity(dim + 4);
        for &c in &self.order {
            let Some(model) = self.models[c].as_ref() else {
                y[c * nt..(c + 1) * nt].iter_mut().for_each(|v| *v = f64::NAN);
                continue;
            };
            let fant = fantasy.and_then(|f| f.comps[c].as_ref());
            match model {
                CompartmentModel::Shared(node) => {
                    let pf = match fant {
                        Some(CompartmentFantasy::Shared(p)) => Some(p),
                        _ => None,
                    };
                    node.eval_std(x, pf, grad, &mut ev);
                    let sd = ev.variance.sqrt();
                    for t in 0..nt {
                        let s = node.target_scaling(t);
                        let e = eps[c * nt + t];
                        let idx = c * nt + t;
                        y[idx] = s.raw(ev.means[t]) + s.scale * sd * e;
                        if let Some(dy) = dy.as_deref_mut() {
                            for k in 0..dim {
                                let dv = if sd > 0.0 { e * ev.d_variance[k] / (2.0 * sd) } else { 0.0 };
                                dy[idx * dim + k] = s.scale * (ev.d_means[t * dim + k] + dv);
                            }
                        }
                    }
                }
                CompartmentModel::PerTime(nodes) => {
                    let parents = self.network.parents(c);
                    for t in 0..nt {
                        let node = &nodes[t];
                        q.clear();
                        q.extend_from_slice(x);
                        q.extend(parents.iter().map(|&p| y[p * nt + t]));
                        let pf = match fant {
                            Some(CompartmentFantasy::PerTime(ps)) => Some(&ps[t]),
                            _ => None,
                        };
                        node.eval_std(&q, pf, grad, &mut ev);
                        let s = node.target_scaling(0);
                        let sd = ev.variance.sqrt();
                        let e = eps[c * nt + t];
                        let idx = c * nt + t;
                        y[idx] = s.raw(ev.means[0]) + s.scale * sd * e;
                        if let Some(dy) = dy.as_deref_mut() {
                            let in_scale = &node.input_scaling().scale;
                            // Partial derivatives with respect to the raw node input.
                            let partial: Vec<f64> = (0..q.len())
                                .map(|j| {
                                    let dv = if sd > 0.0 { e * ev.d_variance[j] / (2.0 * sd) } else { 0.0 };
                                    s.scale * (ev.d_means[j] + dv) / in_scale[j]
                                })
                                .collect();
                            for k in 0..dim {
                                let mut total = partial[k];
                                for (pi, &p) in parents.iter().enumerate() {
                                    total += partial[dim + pi] * dy[(p * nt + t) * dim + k];
                                }
                                dy[idx * dim + k] = total;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Sampled outputs `[compartment][time]` for one epsilon block.
    pub fn sample_network(&self, x: &[f64], eps: &[f64]) -> Vec<Vec<f64>> {
        let mut y = vec![0.0; self.n_nodes()];
        self.sample_into(x, eps, None, &mut y, None);
        y.chunks(self.n_times).map(|c| c.to_vec()).collect()
    }

    /// Monte-Carlo estimate `(1/L) sum_l g(sample_l)` over explicit draws,
    /// with its gradient in `x` when `grad` is given.
    pub fn expected_metric_sampled(
        &self,
        targets: &MetricTargets,
        x: &[f64],
        draws: &InnerDraws,
        fantasy: Option<&NetworkFantasy>,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let (nn, dim, nt) = (self.n_nodes(), self.dim, self.n_times);
        let mut y = vec![0.0; nn];
        let want = grad.is_some();
        let mut dy = if want { vec![0.0; nn * dim] } else { Vec::new() };
        let mut total = 0.0;
        let mut g = vec![0.0; dim];
        for l in 0..draws.n_samples {
            self.sample_into(x, draws.sample(l), fantasy, &mut y, if want { Some(&mut dy) } else { None });
            total += targets.score(&y);
            if want {
                for (c, row) in targets.d.iter().enumerate() {
                    for (t, d) in row.iter().enumerate() {
                        if let Some(d) = d {
                            let idx = c * nt + t;
                            let r = 2.0 * (d - y[idx]) / targets.t_norm;
                            for k in 0..dim {
                                g[k] += r * dy[idx * dim + k];
                            }
                        }
                    }
                }
            }
        }
        let inv = 1.0 / draws.n_samples as f64;
        if let Some(out) = grad {
            for k in 0..dim {
                out[k] = g[k] * inv;
            }
        }
        total * inv
    }

    /// Exact sample average for a factorized surrogate, using only the
    /// per-node draw moments: with `y = mu + sigma e`,
    /// `mean_l (d - y_l)^2 = (d - mu)^2 - 2 (d - mu) sigma m1 + sigma^2 m2`.
    pub fn expected_metric_moments(
        &self,
        targets: &MetricTargets,
        x: &[f64],
        draws: &InnerDraws,
        fantasy: Option<&NetworkFantasy>,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let (dim, nt) = (self.dim, self.n_times);
        let want = grad.is_some();
        let mut ev = NodeEval::default();
        let mut total = 0.0;
        let mut g = vec![0.0; dim];
        for (c, row) in targets.d.iter().enumerate() {
            if row.iter().all(Option::is_none) {
                continue;
            }
            let Some(CompartmentModel::Shared(node)) = self.models[c].as_ref() else {
                panic!("moment evaluation requires a factorized surrogate");
            };
            let pf = match fantasy.and_then(|f| f.comps[c].as_ref()) {
                Some(CompartmentFantasy::Shared(p)) => Some(p),
                _ => None,
            };
            node.eval_std(x, pf, want, &mut ev);
            let sd_std = ev.variance.sqrt();
            for (t, d) in row.iter().enumerate() {
                let Some(d) = d else { continue };
                let s = node.target_scaling(t);
                let j = c * nt + t;
                let (m1, m2) = (draws.m1[j], draws.m2[j]);
                let mu = s.raw(ev.means[t]);
                let sigma = s.scale * sd_std;
                let r = d - mu;
                total += r * r - 2.0 * r * sigma * m1 + sigma * sigma * m2;
                if want {
                    let d_mu = -2.0 * r + 2.0 * sigma * m1;
                    let d_sigma = -2.0 * r * m1 + 2.0 * sigma * m2;
                    for k in 0..dim {
                        let dmu = s.scale * ev.d_means[t * dim + k];
                        let dsig = if sd_std > 0.0 { s.scale * ev.d_variance[k] / (2.0 * sd_std) } else { 0.0 };
                        g[k] += d_mu * dmu + d_sigma * dsig;
                    }
                }
            }
        }
        if let Some(out) = grad {
            for k in 0..dim {
                out[k] = -g[k] / targets.t_norm;
            }
        }
        -total / targets.t_norm
    }

    /// The sample-average expected metric, choosing the exact moment form
    /// when the surrogate is factorized.
    pub fn expected_metric(
        &self,
        targets: &MetricTargets,
        x: &[f64],
        draws: &InnerDraws,
        fantasy: Option<&NetworkFantasy>,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        if self.is_factorized() {
            self.expected_metric_moments(targets, x, draws, fantasy, grad)
        } else {
            self.expected_metric_sampled(targets, x, draws, fantasy, grad)
        }
    }

    /// Samples the network at `x` with `eps` and builds rank-one conditioning
    /// of the compartments selected by `z` on those sampled values.
    pub fn make_fantasy(&self, x: &[f64], eps: &[f64], z: &[bool]) -> NetworkFantasy {
        let nt = self.n_times;
        let mut y = vec![0.0; self.n_nodes()];
        self.sample_into(x, eps, None, &mut y, None);
        let comps = (0..self.n_compartments())
            .map(|c| {
                if !z[c] {
                    return None;
                }
                match self.models[c].as_ref()? {
                    CompartmentModel::Shared(node) => Some(CompartmentFantasy::Shared(node.point_fantasy(x, &y[c * nt..(c + 1) * nt]))),
                    CompartmentModel::PerTime(nodes) => {
                        let parents = self.network.parents(c);
                        Some(CompartmentFantasy::PerTime(
                            (0..nt)
                                .map(|t| {
                                    let mut q = x.to_vec();
                                    q.extend(parents.iter().map(|&p| y[p * nt + t]));
                                    nodes[t].point_fantasy(&q, &[y[c * nt + t]])
                                })
                                .collect(),
                        ))
                    }
                }
            })
            .collect();
        NetworkFantasy { comps }
    }

    /// Surrogate with the compartments selected by `z` refactorized on one
    /// appended observation `(x, outputs)`.
    pub fn condition_on(&self, x: &[f64], outputs: &[Vec<f64>], z: &[bool]) -> Result<Self> {
        let mut out = self.clone();
        for c in 0..self.n_compartments() {
            if !z[c] {
                continue;
            }
            let Some(model) = out.models[c].as_mut() else { continue };
            match model {
                CompartmentModel::Shared(node) => *node = node.fantasize(x, &outputs[c])?,
                CompartmentModel::PerTime(nodes) => {
                    let parents = self.network.parents(c).to_vec();
                    for (t, node) in nodes.iter_mut().enumerate() {
                        let mut q = x.to_vec();
                        q.extend(parents.iter().map(|&p| outputs[p][t]));
                        *node = node.fantasize(&q, &[outputs[c][t]])?;
                    }
                }
            }
        }
        Ok(out)
    }
}
