//! The sequential calibration loop: fit, maximize the acquisition, query.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    argmax_with_ties, baseline, iteration_seed, maximize_ei, maximize_kg, AcquisitionKind, AcquisitionSpec, BaseSampleBank,
    BlackboxObjective, Decision, InnerDomain, InnerObjective, NetworkObjective,
};
use crate::error::{Error, Result};
use crate::funcnet::{FitSettings, FunctionNetwork, HistoryPoint, MetricTargets, NetworkSurrogate};
use crate::gp::{fit_pooled, FitGroup, FitOptions, InputScaling, KernelHyperparams, SurrogateNode, TargetScaling};
use crate::optim::{AscentOptions, Bounds};

/// The expensive model, queried on the unit cube.
pub trait Simulator: Sync {
    fn dim(&self) -> usize;

    /// Outputs indexed `[compartment][time]`.
    fn query(&self, x: &[f64]) -> Result<Vec<Vec<f64>>>;
}

impl<F> Simulator for (usize, F)
where
    F: Fn(&[f64]) -> Result<Vec<Vec<f64>>> + Sync,
{
    fn dim(&self) -> usize {
        self.0
    }

    fn query(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        (self.1)(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoSettings {
    /// Acquisition-driven queries after the initial design.
    pub iterations: usize,
    /// Likelihood restarts for the first fit and the final recommendation.
    pub initial_fit_restarts: usize,
    /// Restarts for refits inside the loop, which are warm-started.
    pub loop_fit_restarts: usize,
    pub fit_max_iters: usize,
    pub record_wall_time: bool,
}

impl Default for BoSettings {
    fn default() -> Self {
        Self { iterations: 50, initial_fit_restarts: 8, loop_fit_restarts: 3, fit_max_iters: 60, record_wall_time: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Acquire,
    Fallback,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Acquire => "acquire",
            Phase::Fallback => "fallback",
        }
    }
}

/// One simulator query with its bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub iter: usize,
    pub phase: Phase,
    pub x: Vec<f64>,
    pub z: Option<Vec<bool>>,
    pub acq: Option<f64>,
    pub objective: f64,
    /// `log10` of the smallest mean squared error observed so far.
    pub best_logmse: f64,
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoRun {
    pub kind: AcquisitionKind,
    pub records: Vec<QueryRecord>,
    pub history: Vec<HistoryPoint>,
    /// Maximizer of the final posterior expected objective.
    pub x_best: Vec<f64>,
    pub u_best: f64,
}

impl BoRun {
    pub fn queries(&self) -> usize {
        self.records.len()
    }

    /// Acquisition value at each chosen point, in loop order.
    pub fn acquisition_trace(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.acq).collect()
    }
}

/// `log10` of a mean squared error given the (negative) objective.
pub fn log_mse(objective: f64) -> f64 {
    (-objective).max(1e-300).log10()
}

/// `2 dim + 1` uniform points in the unit cube.
pub fn init_design(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(seed, u64::MAX));
    (0..2 * dim + 1).map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect()).collect()
}

enum Fitted {
    Blackbox(SurrogateNode<f64>, KernelHyperparams<f64>),
    Network(NetworkSurrogate),
}

fn fit_blackbox(xs: &[Vec<f64>], f: &[f64], opts: &FitOptions, seed: u64, warm: Option<&KernelHyperparams<f64>>) -> Result<Fitted> {
    let dim = xs[0].len();
    let ts = TargetScaling::from_values(f);
    let group = FitGroup { x: xs.iter().flatten().copied().collect(), n: xs.len(), ys: vec![f.iter().map(|v| ts.standardize(*v)).collect()] };
    let fit = fit_pooled(std::slice::from_ref(&group), dim, opts, seed, warm)?;
    let node = SurrogateNode::condition(xs, &[f.to_vec()], InputScaling::identity(dim), fit.hyper.clone())?;
    Ok(Fitted::Blackbox(node, fit.hyper))
}

struct Loop<'a> {
    kind: AcquisitionKind,
    spec: &'a AcquisitionSpec,
    network: FunctionNetwork,
    targets: &'a MetricTargets,
    seed: u64,
    groups: usize,
}

impl Loop<'_> {
    fn fit(&self, history: &[HistoryPoint], f: &[f64], opts: &FitOptions, seed: u64, warm: &Warm) -> Result<Fitted> {
        match self.kind.surrogate_mode() {
            None => {
                let xs: Vec<Vec<f64>> = history.iter().map(|h| h.x.clone()).collect();
                fit_blackbox(&xs, f, opts, seed, warm.blackbox.as_ref())
            }
            Some(mode) => {
                let settings = FitSettings { options: opts.clone(), seed };
                NetworkSurrogate::fit(history, &self.network, mode, &settings, warm.network.as_deref()).map(Fitted::Network)
            }
        }
    }

    fn bank(&self, fitted: &Fitted, dim: usize, seed: u64) -> BaseSampleBank {
        match fitted {
            Fitted::Blackbox(..) => BaseSampleBank::new(self.spec, 1, dim, false, seed),
            Fitted::Network(s) => BaseSampleBank::new(self.spec, s.n_nodes(), dim, !s.is_factorized(), seed),
        }
    }

    fn decide(&self, fitted: &Fitted, bank: &BaseSampleBank, best: f64, incumbent: &[f64]) -> Result<Decision> {
        let bounds = Bounds::unit(incumbent.len());
        match (fitted, self.kind) {
            (Fitted::Blackbox(node, _), AcquisitionKind::Ei) => maximize_ei(node, best, self.spec, bank, &bounds, Some(incumbent), self.groups),
            (Fitted::Blackbox(node, _), _) => {
                let obj = BlackboxObjective { node, groups: self.groups };
                maximize_kg(&obj, self.spec, bank, &bounds, Some(incumbent)).map(|(d, _)| d)
            }
            (Fitted::Network(s), _) => {
                let obj = NetworkObjective { surrogate: s, targets: self.targets };
                maximize_kg(&obj, self.spec, bank, &bounds, Some(incumbent)).map(|(d, _)| d)
            }
        }
    }

    fn recommend(&self, fitted: &Fitted, bank: &BaseSampleBank, history: &[HistoryPoint]) -> Result<(Vec<f64>, f64)> {
        match fitted {
            Fitted::Blackbox(node, _) => recommend(&BlackboxObjective { node, groups: self.groups }, bank, history, self.spec),
            Fitted::Network(s) => recommend(&NetworkObjective { surrogate: s, targets: self.targets }, bank, history, self.spec),
        }
    }
}

#[derive(Default)]
struct Warm {
    blackbox: Option<KernelHyperparams<f64>>,
    network: Option<Vec<Option<KernelHyperparams<f64>>>>,
}

impl Warm {
    fn from(fitted: &Fitted) -> Self {
        match fitted {
            Fitted::Blackbox(_, h) => Self { blackbox: Some(h.clone()), network: None },
            Fitted::Network(s) => Self { blackbox: None, network: Some(s.hyperparameters().to_vec()) },
        }
    }
}

/// Maximizer of the posterior expected objective. History points are
/// candidates ahead of the continuous search result, so ties resolve to the
/// earliest queried point.
pub fn recommend<O: InnerObjective>(
    obj: &O,
    bank: &BaseSampleBank,
    history: &[HistoryPoint],
    spec: &AcquisitionSpec,
) -> Result<(Vec<f64>, f64)> {
    let dim = obj.dim();
    let values: Vec<Option<f64>> = history.iter().map(|h| Some(obj.value(&h.x, &bank.inner, None, None)).filter(|v| v.is_finite())).collect();
    let inc = argmax_with_ties(&values).ok_or(Error::InnerOptFailure)?;
    let domain = InnerDomain::Continuous {
        bounds: Bounds::unit(dim),
        opts: AscentOptions { max_iters: spec.inner_max_iters, ..Default::default() },
    };
    let base = baseline(obj, bank, &domain, Some(&history[inc].x))?;
    let mut all = values;
    all.push(Some(base.value));
    let best = argmax_with_ties(&all).ok_or(Error::InnerOptFailure)?;
    if best < history.len() {
        Ok((history[best].x.clone(), all[best].unwrap()))
    } else {
        Ok((base.x_star, base.value))
    }
}

/// Runs the initial design and `settings.iterations` acquisition steps.
/// `network` is pruned to the observed compartments before use.
pub fn run_bo<S: Simulator + ?Sized>(
    sim: &S,
    targets: &MetricTargets,
    network: &FunctionNetwork,
    spec: &AcquisitionSpec,
    settings: &BoSettings,
    seed: u64,
) -> Result<BoRun> {
    spec.validate()?;
    let dim = sim.dim();
    if dim == 0 {
        return Err(Error::InvalidArgument("simulator has no parameters".into()));
    }
    let network = network.prune_metric_edges(&targets.observed_compartments())?;
    let lp = Loop { kind: spec.kind, spec, network, targets, seed, groups: targets.n_compartments() };
    let flat = |o: &[Vec<f64>]| -> Vec<f64> { o.iter().flatten().copied().collect() };

    let mut history = Vec::new();
    let mut f = Vec::new();
    let mut records = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for x in init_design(dim, seed) {
        let t0 = Instant::now();
        let outputs = sim.query(&x)?;
        let obj = targets.score(&flat(&outputs));
        best = best.max(obj);
        records.push(QueryRecord {
            iter: records.len(),
            phase: Phase::Init,
            x: x.clone(),
            z: None,
            acq: None,
            objective: obj,
            best_logmse: log_mse(best),
            wall_ms: settings.record_wall_time.then(|| t0.elapsed().as_secs_f64() * 1e3),
        });
        history.push(HistoryPoint { x, outputs });
        f.push(obj);
    }

    let initial_opts = FitOptions { restarts: settings.initial_fit_restarts, max_iters: settings.fit_max_iters, ..Default::default() };
    let loop_opts = FitOptions { restarts: settings.loop_fit_restarts, ..initial_opts.clone() };
    let mut warm = Warm::default();
    for n in 0..settings.iterations {
        let t0 = Instant::now();
        let iter_seed = iteration_seed(lp.seed ^ spec.seed, n as u64);
        let opts = if n == 0 { &initial_opts } else { &loop_opts };
        let fitted = lp.fit(&history, &f, opts, iter_seed, &warm)?;
        warm = Warm::from(&fitted);
        let bank = lp.bank(&fitted, dim, iter_seed);
        let inc = argmax_with_ties(&f.iter().map(|v| Some(*v)).collect::<Vec<_>>()).unwrap_or(0);
        let incumbent = history[inc].x.clone();
        let (x, z, acq, phase) = match lp.decide(&fitted, &bank, best, &incumbent) {
            Ok(d) => (d.x, Some(d.z), Some(d.value), Phase::Acquire),
            Err(e) => {
                log::warn!("iteration {n}: acquisition maximization failed ({e}); querying a random point");
                let mut rng = ChaCha8Rng::seed_from_u64(iter_seed);
                ((0..dim).map(|_| rng.gen::<f64>()).collect(), None, None, Phase::Fallback)
            }
        };
        let outputs = sim.query(&x)?;
        let obj = targets.score(&flat(&outputs));
        best = best.max(obj);
        log::debug!("{} iteration {n}: acq {:?} objective {obj:.3e}", spec.kind, acq);
        records.push(QueryRecord {
            iter: records.len(),
            phase,
            x: x.clone(),
            z,
            acq,
            objective: obj,
            best_logmse: log_mse(best),
            wall_ms: settings.record_wall_time.then(|| t0.elapsed().as_secs_f64() * 1e3),
        });
        history.push(HistoryPoint { x, outputs });
        f.push(obj);
    }

    let final_seed = iteration_seed(lp.seed ^ spec.seed, settings.iterations as u64);
    let fitted = lp.fit(&history, &f, &initial_opts, final_seed, &warm)?;
    let bank = lp.bank(&fitted, dim, final_seed);
    let (x_best, u_best) = lp.recommend(&fitted, &bank, &history)?;
    Ok(BoRun { kind: spec.kind, records, history, x_best, u_best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn design_size_and_determinism() {
        let a = init_design(4, 7);
        assert_eq!(a.len(), 9);
        assert_eq!(a, init_design(4, 7));
        assert_ne!(a, init_design(4, 8));
        let b = init_design(1, 0);
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|p| (0.0..=1.0).contains(&p[0])));
    }

    #[test]
    fn log_mse_of_objective() {
        assert_eq!(log_mse(-0.01), -2.0);
        assert!(log_mse(0.0) <= -299.0);
    }
}
