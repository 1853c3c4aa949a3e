//! SIQR compartmental dynamics with pluggable rate functions.
//!
//! ```text
//! dS/dt = -beta S
//! dI/dt =  beta S - lambda I - gamma I
//! dQ/dt =  lambda I - delta Q
//! dR/dt =  gamma I + delta Q
//! ```
//!
//! `beta` and `lambda` are per-capita rates that may depend on the current
//! state; `delta` and `gamma` are constants. Integration is classical RK4 at a
//! fixed step, so a given `(spec, init, grid)` always yields the same
//! trajectory bit for bit.

use crate::error::{Error, Result};
use crate::neural::Mlp;
use crate::scalar::Real;

pub const N_COMPARTMENTS: usize = 4;
pub const COMPARTMENT_NAMES: [&str; N_COMPARTMENTS] = ["S", "I", "Q", "R"];

/// Index of each compartment in `[S, I, Q, R]` arrays.
pub mod idx {
    pub const S: usize = 0;
    pub const I: usize = 1;
    pub const Q: usize = 2;
    pub const R: usize = 3;
}

/// Undershoot below zero that is absorbed by clamping, relative to the total.
const CLAMP_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompartmentState<T> {
    pub s: T,
    pub i: T,
    pub q: T,
    pub r: T,
}

impl<T: Real> CompartmentState<T> {
    pub fn new(s: T, i: T, q: T, r: T) -> Self {
        Self { s, i, q, r }
    }

    pub fn from_array(v: [T; 4]) -> Self {
        Self { s: v[0], i: v[1], q: v[2], r: v[3] }
    }

    pub fn to_array(self) -> [T; 4] {
        [self.s, self.i, self.q, self.r]
    }

    pub fn total(&self) -> T {
        self.s + self.i + self.q + self.r
    }

    /// Checks finiteness and non-negativity.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in COMPARTMENT_NAMES.iter().zip(self.to_array()) {
            if !v.is_finite() {
                return Err(Error::NumericalFailure(format!("compartment {name} is {v}")));
            }
            if v < T::zero() {
                return Err(Error::DomainError(format!("compartment {name} is negative ({v})")));
            }
        }
        Ok(())
    }
}

/// Rate-function parameterisation of the simulator.
#[derive(Clone, Debug, PartialEq)]
pub enum RateSpec<T> {
    /// `lambda = x1 I`, `beta = x2 I`, `delta = x3`, `gamma = x4`.
    Linear { lambda: T, beta: T, delta: T, gamma: T },
    /// `lambda = ln([I, S, R] . c + 1) I`, other rates as in `Linear`.
    LogNonlinear { lambda: [T; 3], beta: T, delta: T, gamma: T },
    /// `lambda = f_nn([I, S, R]) I`, other rates as in `Linear`.
    NeuralNet { net: Mlp<T>, beta: T, delta: T, gamma: T },
}

impl<T: Real> RateSpec<T> {
    /// Linear rates from a calibration vector `(x1, x2, x3, x4)`.
    pub fn linear(x: &[T]) -> Result<Self> {
        if x.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "linear rate spec needs 4 coefficients, got {}",
                x.len()
            )));
        }
        Ok(Self::Linear { lambda: x[0], beta: x[1], delta: x[2], gamma: x[3] })
    }

    pub fn zero() -> Self {
        Self::Linear { lambda: T::zero(), beta: T::zero(), delta: T::zero(), gamma: T::zero() }
    }

    /// The `(beta, delta, gamma)` coefficients shared by every variant.
    pub fn shared_coefficients(&self) -> [T; 3] {
        match self {
            Self::Linear { beta, delta, gamma, .. }
            | Self::LogNonlinear { beta, delta, gamma, .. }
            | Self::NeuralNet { beta, delta, gamma, .. } => [*beta, *delta, *gamma],
        }
    }

    fn coefficients_finite(&self) -> bool {
        let lam_ok = match self {
            Self::Linear { lambda, .. } => lambda.is_finite(),
            Self::LogNonlinear { lambda, .. } => lambda.iter().all(|c| c.is_finite()),
            Self::NeuralNet { .. } => true,
        };
        lam_ok && self.shared_coefficients().iter().all(|c| c.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates<T> {
    pub beta: T,
    pub lambda: T,
    pub delta: T,
    pub gamma: T,
}

/// Evaluates the four rates at `state`.
pub fn eval_rates<T: Real>(state: &CompartmentState<T>, spec: &RateSpec<T>) -> Result<Rates<T>> {
    if !spec.coefficients_finite() {
        return Err(Error::NumericalFailure("non-finite rate coefficient".into()));
    }
    let i = state.i;
    let [beta_c, delta, gamma] = spec.shared_coefficients();
    let lambda = match spec {
        RateSpec::Linear { lambda, .. } => *lambda * i,
        RateSpec::LogNonlinear { lambda: c, .. } => {
            let arg = c[0] * state.i + c[1] * state.s + c[2] * state.r;
            if arg <= -T::one() {
                return Err(Error::DomainError(format!("log argument {} is not positive", arg + T::one())));
            }
            arg.ln_1p() * i
        }
        RateSpec::NeuralNet { net, .. } => net.forward_scalar(&[state.i, state.s, state.r]) * i,
    };
    let rates = Rates { beta: beta_c * i, lambda, delta, gamma };
    for v in [rates.beta, rates.lambda, rates.delta, rates.gamma] {
        if !v.is_finite() {
            return Err(Error::NumericalFailure(format!("rate evaluated to {v}")));
        }
    }
    Ok(rates)
}

/// Right-hand side of the SIQR system for given rates.
#[inline]
pub fn derivative<T: Real>(state: &CompartmentState<T>, rates: &Rates<T>) -> [T; 4] {
    let infection = rates.beta * state.s;
    let quarantine = rates.lambda * state.i;
    let recovery = rates.gamma * state.i;
    let release = rates.delta * state.q;
    [
        -infection,
        infection - quarantine - recovery,
        quarantine - release,
        recovery + release,
    ]
}

/// Fixed-step integration grid with a regular observation schedule.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    /// Start time (days).
    pub t0: f64,
    /// Integration length (days).
    pub horizon: f64,
    /// RK4 step (days).
    pub dt: f64,
    /// Spacing of the base output schedule (days); observations fall on
    /// every `stride`-th output.
    pub output_interval: f64,
    pub stride: usize,
    /// Whether `t0` itself is an observation point.
    pub include_initial: bool,
}

pub const DEFAULT_DT: f64 = 0.05;

impl TimeGrid {
    /// Daily outputs over `horizon` days, `t0` excluded (the simulated-data layout).
    pub fn daily(horizon: f64, stride: usize) -> Self {
        Self { t0: 0.0, horizon, dt: DEFAULT_DT, output_interval: 1.0, stride, include_initial: false }
    }

    /// Daily outputs including `t0` (`horizon + 1` rows for stride 1).
    pub fn daily_with_initial(horizon: f64, stride: usize) -> Self {
        Self { include_initial: true, ..Self::daily(horizon, stride) }
    }

    pub fn with_dt(self, dt: f64) -> Self {
        Self { dt, ..self }
    }

    fn ratio(a: f64, b: f64, what: &str) -> Result<usize> {
        let r = a / b;
        let n = r.round();
        if !(r.is_finite() && n >= 0.0 && (r - n).abs() <= 1e-9 * n.max(1.0)) {
            return Err(Error::InvalidArgument(format!("{what} ({a}/{b}) is not an integer")));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite() && self.t0.is_finite()) {
            return Err(Error::InvalidArgument("horizon must be finite and non-negative".into()));
        }
        if !(self.output_interval > 0.0) || self.stride == 0 {
            return Err(Error::InvalidArgument("output interval and stride must be positive".into()));
        }
        self.n_steps()?;
        self.steps_per_observation()?;
        Ok(())
    }

    pub fn n_steps(&self) -> Result<usize> {
        Self::ratio(self.horizon, self.dt, "horizon/dt")
    }

    pub fn steps_per_observation(&self) -> Result<usize> {
        let n = Self::ratio(self.output_interval * self.stride as f64, self.dt, "observation spacing/dt")?;
        if n == 0 {
            return Err(Error::InvalidArgument("observation spacing shorter than dt".into()));
        }
        Ok(n)
    }

    /// Integration step indices at which observations are recorded.
    pub fn observation_steps(&self) -> Result<Vec<usize>> {
        let n_steps = self.n_steps()?;
        let every = self.steps_per_observation()?;
        let first = if self.include_initial { 0 } else { every };
        Ok((first..=n_steps).step_by(every).collect())
    }

    pub fn observation_times(&self) -> Result<Vec<f64>> {
        Ok(self
            .observation_steps()?
            .into_iter()
            .map(|k| self.t0 + k as f64 * self.dt)
            .collect())
    }

    pub fn n_observations(&self) -> Result<usize> {
        Ok(self.observation_steps()?.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub grid: TimeGrid,
    pub states: Vec<CompartmentState<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn values(&self) -> Vec<[T; 4]> {
        self.states.iter().map(|s| s.to_array()).collect()
    }

    pub fn compartment(&self, c: usize) -> Vec<T> {
        self.states.iter().map(|s| s.to_array()[c]).collect()
    }
}

fn axpy<T: Real>(u: &[T; 4], h: T, k: &[T; 4]) -> CompartmentState<T> {
    CompartmentState::from_array([u[0] + h * k[0], u[1] + h * k[1], u[2] + h * k[2], u[3] + h * k[3]])
}

/// One classical RK4 step.
pub fn rk4_step<T: Real>(state: &CompartmentState<T>, spec: &RateSpec<T>, h: T) -> Result<CompartmentState<T>> {
    let u = state.to_array();
    let half = h * T::lit(0.5);
    let k1 = derivative(state, &eval_rates(state, spec)?);
    let s2 = axpy(&u, half, &k1);
    let k2 = derivative(&s2, &eval_rates(&s2, spec)?);
    let s3 = axpy(&u, half, &k2);
    let k3 = derivative(&s3, &eval_rates(&s3, spec)?);
    let s4 = axpy(&u, h, &k3);
    let k4 = derivative(&s4, &eval_rates(&s4, spec)?);
    let sixth = h / T::lit(6.0);
    let two = T::lit(2.0);
    let mut next = [T::zero(); 4];
    for c in 0..4 {
        next[c] = u[c] + sixth * (k1[c] + two * k2[c] + two * k3[c] + k4[c]);
    }
    Ok(CompartmentState::from_array(next))
}

/// Clamps roundoff-level negatives; larger undershoot or NaN is an error.
pub(crate) fn settle<T: Real>(state: CompartmentState<T>, total: T, step: usize) -> Result<CompartmentState<T>> {
    let tol = T::lit(CLAMP_TOL) * total.abs().max(T::one());
    let mut v = state.to_array();
    for (c, x) in v.iter_mut().enumerate() {
        if x.is_nan() || x.is_infinite() {
            return Err(Error::NumericalFailure(format!(
                "compartment {} became {x} at step {step}",
                COMPARTMENT_NAMES[c]
            )));
        }
        if *x < T::zero() {
            if *x < -tol {
                return Err(Error::NumericalFailure(format!(
                    "compartment {} undershot to {x} at step {step}",
                    COMPARTMENT_NAMES[c]
                )));
            }
            *x = T::zero();
        }
    }
    Ok(CompartmentState::from_array(v))
}

/// Integrates the SIQR system from `init` over `grid` with RK4.
pub fn simulate<T: Real>(
    spec: &RateSpec<T>,
    init: &CompartmentState<T>,
    grid: &TimeGrid,
) -> Result<Trajectory<T>> {
    grid.validate()?;
    init.validate()?;
    let n_steps = grid.n_steps()?;
    let obs_steps = grid.observation_steps()?;
    let h = T::lit(grid.dt);
    let total = init.total();

    let mut states = Vec::with_capacity(obs_steps.len());
    let mut next_obs = obs_steps.iter().peekable();
    let mut current = *init;
    if next_obs.peek() == Some(&&0) {
        states.push(current);
        next_obs.next();
    }
    for step in 1..=n_steps {
        current = settle(rk4_step(&current, spec, h)?, total, step)?;
        if next_obs.peek() == Some(&&step) {
            states.push(current);
            next_obs.next();
        }
    }
    Ok(Trajectory { grid: *grid, states })
}
