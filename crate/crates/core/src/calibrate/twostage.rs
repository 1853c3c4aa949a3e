//! Two-stage calibration: BO on the simple model, then gradient training of
//! a neural infection-to-quarantine rate on windows of the infectious series.
//!
//! Stage-2 gradients are exact for the discretized objective: the loss is
//! differentiated backward through the unrolled RK4 steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::AcquisitionSpec;
use crate::calibrate::bo::{run_bo, BoRun, BoSettings, Simulator};
use crate::error::{Error, Result};
use crate::funcnet::{FunctionNetwork, MetricTargets};
use crate::neural::{Mlp, MlpCache};
use crate::ode::{idx, simulate, CompartmentState, RateSpec, TimeGrid};

/// Daily stage-2 training data as population fractions; index 0 is day 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Data {
    pub infectious: Vec<f64>,
    pub susceptible: Vec<f64>,
    pub quarantined: Vec<f64>,
    pub recovered: Vec<f64>,
}

impl Stage2Data {
    pub fn len(&self) -> usize {
        self.infectious.len()
    }

    pub fn is_empty(&self) -> bool {
        self.infectious.is_empty()
    }

    fn state(&self, day: usize) -> [f64; 4] {
        [self.susceptible[day], self.infectious[day], self.quarantined[day], self.recovered[day]]
    }

    fn scale(&self) -> f64 {
        let m = self.infectious.iter().copied().fold(0.0, f64::max);
        if m > 0.0 {
            m
        } else {
            1.0
        }
    }
}

/// Trainable stage-2 model: the rate network and `(beta, delta, gamma)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Params {
    pub net: Mlp<f64>,
    pub coeffs: [f64; 3],
}

impl Stage2Params {
    pub fn n_params(&self) -> usize {
        self.net.n_params() + 3
    }

    /// Network weights followed by the three coefficients.
    pub fn flat(&self) -> Vec<f64> {
        let mut p = self.net.params();
        p.extend_from_slice(&self.coeffs);
        p
    }

    pub fn set_flat(&mut self, p: &[f64]) -> Result<()> {
        let n = self.net.n_params();
        self.net.set_params(&p[..n])?;
        self.coeffs.copy_from_slice(&p[n..n + 3]);
        Ok(())
    }

    pub fn rate_spec(&self) -> RateSpec<f64> {
        RateSpec::NeuralNet { net: self.net.clone(), beta: self.coeffs[0], delta: self.coeffs[1], gamma: self.coeffs[2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Settings {
    /// Windows averaged per gradient step.
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Window length in days.
    pub window: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for Stage2Settings {
    fn default() -> Self {
        Self { batch_size: 30, iterations: 2000, learning_rate: 5e-4, window: 30, dt: 0.25, seed: 0 }
    }
}

impl Stage2Settings {
    fn steps_per_day(&self) -> Result<usize> {
        let r = 1.0 / self.dt;
        if !(self.dt > 0.0) || (r - r.round()).abs() > 1e-9 {
            return Err(Error::Config { field: "dt".into(), reason: "must divide one day".into() });
        }
        Ok(r.round() as usize)
    }

    pub fn validate(&self, data_len: usize) -> Result<()> {
        self.steps_per_day()?;
        if self.window == 0 || self.window >= data_len {
            return Err(Error::Config { field: "window".into(), reason: format!("must be in 1..{data_len}") });
        }
        if self.batch_size == 0 {
            return Err(Error::Config { field: "batch_size".into(), reason: "must be at least 1".into() });
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config { field: "learning_rate".into(), reason: "must be non-negative".into() });
        }
        Ok(())
    }
}

fn rhs(p: &Stage2Params, y: &[f64; 4], cache: &mut MlpCache<f64>) -> [f64; 4] {
    let (s, i, q, r) = (y[idx::S], y[idx::I], y[idx::Q], y[idx::R]);
    let a = p.net.forward_cached(&[i, s, r], cache);
    let [b, d, g] = p.coeffs;
    [-b * i * s, b * i * s - a * i * i - g * i, a * i * i - d * q, g * i + d * q]
}

/// Accumulates `v^T df/dy` into `gy` and `v^T df/dp` into `gp`; `cache`
/// holds the network pass at `y`.
fn rhs_vjp(p: &Stage2Params, y: &[f64; 4], v: &[f64; 4], gy: &mut [f64; 4], gp: &mut [f64], cache: &mut MlpCache<f64>) {
    let (s, i, q) = (y[idx::S], y[idx::I], y[idx::Q]);
    let a = cache.output();
    let [b, d, g] = p.coeffs;
    let n = p.net.n_params();
    gy[idx::S] += (v[1] - v[0]) * b * i;
    gy[idx::I] += -v[0] * b * s + v[1] * (b * s - 2.0 * a * i - g) + v[2] * 2.0 * a * i + v[3] * g;
    gy[idx::Q] += (v[3] - v[2]) * d;
    gp[n] += (v[1] - v[0]) * i * s;
    gp[n + 1] += (v[3] - v[2]) * q;
    gp[n + 2] += (v[3] - v[1]) * i;
    let mut gin = [0.0; 3];
    p.net.backward(cache, (v[2] - v[1]) * i * i, &mut gp[..n], &mut gin);
    gy[idx::I] += gin[0];
    gy[idx::S] += gin[1];
    gy[idx::R] += gin[2];
}

fn axpy(y: &[f64; 4], h: f64, k: &[f64; 4]) -> [f64; 4] {
    std::array::from_fn(|c| y[c] + h * k[c])
}

/// Stage inputs and network passes of one RK4 step, kept for the reverse pass.
#[derive(Default)]
struct StepTape {
    stages: [[f64; 4]; 4],
    caches: [MlpCache<f64>; 4],
}

fn rk4(p: &Stage2Params, y: &[f64; 4], h: f64, tape: &mut StepTape) -> [f64; 4] {
    tape.stages[0] = *y;
    let k1 = rhs(p, y, &mut tape.caches[0]);
    tape.stages[1] = axpy(y, 0.5 * h, &k1);
    let k2 = rhs(p, &tape.stages[1], &mut tape.caches[1]);
    tape.stages[2] = axpy(y, 0.5 * h, &k2);
    let k3 = rhs(p, &tape.stages[2], &mut tape.caches[2]);
    tape.stages[3] = axpy(y, h, &k3);
    let k4 = rhs(p, &tape.stages[3], &mut tape.caches[3]);
    std::array::from_fn(|c| y[c] + h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]))
}

/// Reverse pass of one taped RK4 step given the adjoint `ybar` of its
/// output; returns the adjoint of the step's input.
fn rk4_vjp(p: &Stage2Params, tape: &mut StepTape, h: f64, ybar: &[f64; 4], gp: &mut [f64]) -> [f64; 4] {
    let mut out = *ybar;
    // Adjoints of k1..k4 from the final combination.
    let mut kb = [[0.0; 4]; 4];
    for c in 0..4 {
        kb[0][c] = h / 6.0 * ybar[c];
        kb[1][c] = h / 3.0 * ybar[c];
        kb[2][c] = h / 3.0 * ybar[c];
        kb[3][c] = h / 6.0 * ybar[c];
    }
    let feed = [0.0, 0.5 * h, 0.5 * h, h];
    for s in (0..4).rev() {
        let mut g = [0.0; 4];
        let v = kb[s];
        rhs_vjp(p, &tape.stages[s], &v, &mut g, gp, &mut tape.caches[s]);
        for c in 0..4 {
            out[c] += g[c];
            if s > 0 {
                kb[s - 1][c] += feed[s] * g[c];
            }
        }
    }
    out
}

/// Normalized mean squared error of the simulated infectious fraction over
/// the `window` days after `start`, simulating from the data state at
/// `start`. With `grad`, the gradient in [`Stage2Params::flat`] layout is
/// added to it. Returns `None` when the simulation leaves finite values.
pub fn window_loss(
    p: &Stage2Params,
    data: &Stage2Data,
    start: usize,
    window: usize,
    dt: f64,
    grad: Option<&mut [f64]>,
) -> Option<f64> {
    let spd = (1.0 / dt).round() as usize;
    let n_steps = window * spd;
    let scale = data.scale();
    let want = grad.is_some();
    let mut tapes: Vec<StepTape> = (0..if want { n_steps } else { 1 }).map(|_| StepTape::default()).collect();
    let mut ys = Vec::with_capacity(n_steps + 1);
    ys.push(data.state(start));
    for k in 0..n_steps {
        let tape = &mut tapes[if want { k } else { 0 }];
        let next = rk4(p, &ys[k], dt, tape);
        if next.iter().any(|v| !v.is_finite()) {
            return None;
        }
        ys.push(next);
    }
    let w = window as f64;
    let resid: Vec<f64> = (1..=window).map(|j| (ys[j * spd][idx::I] - data.infectious[start + j]) / scale).collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / w;
    if let Some(gp) = grad {
        let mut ybar = [0.0; 4];
        for k in (1..=n_steps).rev() {
            if k % spd == 0 {
                ybar[idx::I] += 2.0 * resid[k / spd - 1] / (w * scale);
            }
            ybar = rk4_vjp(p, &mut tapes[k - 1], dt, &ybar, gp);
        }
    }
    loss.is_finite().then_some(loss)
}

/// Mean window loss over every admissible start day.
pub fn mean_window_loss(p: &Stage2Params, data: &Stage2Data, window: usize, dt: f64) -> Option<f64> {
    let starts = data.len() - window;
    let losses: Vec<Option<f64>> = (0..starts).into_par_iter().map(|s| window_loss(p, data, s, window, dt, None)).collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Some(total / starts as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Result {
    pub params: Stage2Params,
    /// Batch loss at each step.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Plain SGD on randomly drawn windows. The three coefficients are kept
/// non-negative.
pub fn train_stage2(init: &Stage2Params, data: &Stage2Data, settings: &Stage2Settings) -> Result<Stage2Result> {
    settings.validate(data.len())?;
    let mut p = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let n_starts = data.len() - settings.window;
    let initial_loss = mean_window_loss(&p, data, settings.window, settings.dt).ok_or(Error::Divergence { step: 0 })?;
    let mut losses = Vec::with_capacity(settings.iterations);
    let n = p.n_params();
    for step in 0..settings.iterations {
        let starts: Vec<usize> = (0..settings.batch_size).map(|_| rng.gen_range(0..n_starts)).collect();
        let per_window: Vec<Option<(f64, Vec<f64>)>> = starts
            .par_iter()
            .map(|&s| {
                let mut g = vec![0.0; n];
                window_loss(&p, data, s, settings.window, settings.dt, Some(&mut g)).map(|l| (l, g))
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; n];
        for r in per_window {
            let (l, g) = r.ok_or(Error::Divergence { step })?;
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let inv = 1.0 / settings.batch_size as f64;
        loss *= inv;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step });
        }
        losses.push(loss);
        let mut flat = p.flat();
        for (v, g) in flat.iter_mut().zip(&grad) {
            *v -= settings.learning_rate * g * inv;
        }
        for c in &mut flat[n - 3..] {
            *c = c.max(0.0);
        }
        p.set_flat(&flat)?;
    }
    let final_loss = mean_window_loss(&p, data, settings.window, settings.dt).ok_or(Error::Divergence { step: settings.iterations })?;
    Ok(Stage2Result { params: p, losses, initial_loss, final_loss })
}

/// Stage-1 simulator on the unit cube: rates `x1..x4` in [0, 1], initial
/// infectious `x5` and population `x6` log-uniform over their ranges.
/// Outputs are persons divided by the first observed count.
pub struct StageOneSimulator {
    pub i0_hat: f64,
    pub grid: TimeGrid,
}

impl StageOneSimulator {
    pub fn new(i0_hat: f64, grid: TimeGrid) -> Self {
        Self { i0_hat, grid }
    }

    /// Physical `(x1..x4, I(0), N)` for a unit-cube point.
    pub fn physical(&self, u: &[f64]) -> [f64; 6] {
        let log_span = |lo: f64, hi: f64, t: f64| (lo.ln() + t * (hi / lo).ln()).exp();
        [
            u[0],
            u[1],
            u[2],
            u[3],
            log_span(0.1 * self.i0_hat, 10.0 * self.i0_hat, u[4]),
            log_span(10.0 * self.i0_hat, 1000.0 * self.i0_hat, u[5]),
        ]
    }

    /// Fractions `[S, I, Q, R]` on `grid`.
    pub fn trajectory(&self, x: &[f64; 6], grid: &TimeGrid) -> Result<Vec<[f64; 4]>> {
        let i0 = x[4] / x[5];
        let init = CompartmentState::new(1.0 - i0, i0, 0.0, 0.0);
        Ok(simulate(&RateSpec::linear(&x[..4])?, &init, grid)?.values())
    }
}

impl Simulator for StageOneSimulator {
    fn dim(&self) -> usize {
        6
    }

    fn query(&self, u: &[f64]) -> Result<Vec<Vec<f64>>> {
        let x = self.physical(u);
        let rows = self.trajectory(&x, &self.grid)?;
        let k = x[5] / self.i0_hat;
        Ok((0..4).map(|c| rows.iter().map(|r| r[c] * k).collect()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageConfig {
    pub acquisition: AcquisitionSpec,
    pub bo: BoSettings,
    /// Observation stride (days) of the stage-1 objective.
    pub stage1_stride: usize,
    pub stage2: Stage2Settings,
    pub nn_init_seed: u64,
    pub seed: u64,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            acquisition: AcquisitionSpec::default(),
            bo: BoSettings::default(),
            stage1_stride: 1,
            stage2: Stage2Settings::default(),
            nn_init_seed: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoStageResult {
    pub stage1: BoRun,
    /// Physical stage-1 parameters `(x1..x4, I(0), N)`.
    pub x_first: [f64; 6],
    /// `None` when stage 2 diverged.
    pub stage2: Option<Stage2Result>,
    /// Daily infectious counts (persons) from day 0.
    pub observed: Vec<f64>,
    pub stage1_fit: Vec<f64>,
    pub stage2_fit: Option<Vec<f64>>,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

impl TwoStageResult {
    pub fn stage1_mse(&self) -> f64 {
        mse(&self.stage1_fit, &self.observed)
    }

    pub fn stage2_mse(&self) -> Option<f64> {
        self.stage2_fit.as_ref().map(|f| mse(f, &self.observed))
    }
}

/// Stage 1 on `counts` (daily persons from day 0), then stage 2 on the
/// stage-1 compartments.
pub fn run_two_stage(config: &TwoStageConfig, counts: &[f64]) -> Result<TwoStageResult> {
    let days = counts.len();
    if days <= config.stage2.window {
        return Err(Error::InvalidArgument(format!("{days} observations for a {}-day window", config.stage2.window)));
    }
    if counts.iter().any(|c| !(*c >= 0.0)) || !(counts[0] > 0.0) {
        return Err(Error::InvalidArgument("counts must be non-negative with a positive first entry".into()));
    }
    let i0_hat = counts[0];
    let horizon = (days - 1) as f64;
    let grid = TimeGrid::daily(horizon, config.stage1_stride.max(1));
    let obs_days: Vec<usize> = grid.observation_times()?.iter().map(|t| t.round() as usize).collect();
    let mut d = vec![vec![None; obs_days.len()]; 4];
    for (t, day) in obs_days.iter().enumerate() {
        d[idx::I][t] = Some(counts[*day] / i0_hat);
    }
    let targets = MetricTargets::new(d)?;
    let sim = StageOneSimulator::new(i0_hat, grid);
    let stage1 = run_bo(&sim, &targets, &FunctionNetwork::siqr(), &config.acquisition, &config.bo, config.seed)?;
    let x_first = sim.physical(&stage1.x_best);

    let daily = TimeGrid::daily_with_initial(horizon, 1);
    let rows = sim.trajectory(&x_first, &daily)?;
    let n_pop = x_first[5];
    let stage1_fit: Vec<f64> = rows.iter().map(|r| r[idx::I] * n_pop).collect();
    let data = Stage2Data {
        infectious: counts.iter().map(|c| c / n_pop).collect(),
        susceptible: rows.iter().map(|r| r[idx::S]).collect(),
        quarantined: rows.iter().map(|r| r[idx::Q]).collect(),
        recovered: rows.iter().map(|r| r[idx::R]).collect(),
    };
    let init = Stage2Params {
        net: Mlp::lambda_net(&mut ChaCha8Rng::seed_from_u64(config.nn_init_seed)),
        coeffs: [x_first[1], x_first[2], x_first[3]],
    };
    let (stage2, stage2_fit) = match train_stage2(&init, &data, &config.stage2) {
        Ok(r) => {
            let fit = full_trajectory(&r.params, &data, config.stage2.dt)?.iter().map(|i| i * n_pop).collect();
            (Some(r), Some(fit))
        }
        Err(Error::Divergence { step }) => {
            log::warn!("stage 2 diverged at step {step}; keeping the stage-1 result");
            (None, None)
        }
        Err(e) => return Err(e),
    };
    Ok(TwoStageResult { stage1, x_first, stage2, observed: counts.to_vec(), stage1_fit, stage2_fit })
}

/// Daily infectious fractions from day 0 under the stage-2 model, starting
/// from the data state at day 0.
pub fn full_trajectory(p: &Stage2Params, data: &Stage2Data, dt: f64) -> Result<Vec<f64>> {
    let spd = (1.0 / dt).round() as usize;
    let mut y = data.state(0);
    let mut tape = StepTape::default();
    let mut out = vec![y[idx::I]];
    for day in 1..data.len() {
        for _ in 0..spd {
            y = rk4(p, &y, dt, &mut tape);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!("stage-2 trajectory left finite values on day {day}")));
        }
        out.push(y[idx::I]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Stage2Params, Stage2Data) {
        let net = Mlp::lambda_net(&mut ChaCha8Rng::seed_from_u64(3));
        let p = Stage2Params { net, coeffs: [0.9, 0.2, 0.2] };
        let spec = p.rate_spec();
        let traj = simulate(&spec, &CompartmentState::new(0.99, 0.01, 0.0, 0.0), &TimeGrid::daily_with_initial(40.0, 1).with_dt(0.25)).unwrap();
        let v = traj.values();
        let data = Stage2Data {
            infectious: v.iter().map(|r| r[1] * 1.1).collect(),
            susceptible: v.iter().map(|r| r[0]).collect(),
            quarantined: v.iter().map(|r| r[2]).collect(),
            recovered: v.iter().map(|r| r[3]).collect(),
        };
        (p, data)
    }

    #[test]
    fn forward_matches_integrator() {
        let (p, data) = toy();
        let mut d = data.clone();
        d.infectious = data.infectious.iter().map(|v| v / 1.1).collect();
        let traj = full_trajectory(&p, &d, 0.25).unwrap();
        for (a, b) in traj.iter().zip(&d.infectious) {
            assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (p, data) = toy();
        let n = p.n_params();
        let mut g = vec![0.0; n];
        window_loss(&p, &data, 3, 10, 0.25, Some(&mut g)).unwrap();
        let flat = p.flat();
        for &k in &[0, 77, 700, n - 2, n - 1] {
            let h = 1e-6 * flat[k].abs().max(1.0);
            let mut q = p.clone();
            let mut f = flat.clone();
            f[k] += h;
            q.set_flat(&f).unwrap();
            let up = window_loss(&q, &data, 3, 10, 0.25, None).unwrap();
            f[k] -= 2.0 * h;
            q.set_flat(&f).unwrap();
            let dn = window_loss(&q, &data, 3, 10, 0.25, None).unwrap();
            let fd = (up - dn) / (2.0 * h);
            assert!((g[k] - fd).abs() <= 1e-3 * fd.abs().max(1e-8), "param {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (p, data) = toy();
        let s = Stage2Settings { iterations: 3, batch_size: 2, learning_rate: 0.0, ..Default::default() };
        let r = train_stage2(&p, &data, &s).unwrap();
        assert_eq!(r.params, p);
        assert_eq!(r.losses.len(), 3);
    }
}
