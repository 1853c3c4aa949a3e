//! Negative squared-error calibration objective with per-entry observation mask.

use crate::error::{Error, Result};
use crate::ode::{CompartmentState, TimeGrid, Trajectory, N_COMPARTMENTS};
use crate::scalar::Real;

/// Observed populations on a grid; `None` marks an unobserved entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet<T> {
    pub grid: TimeGrid,
    values: Vec<[Option<T>; N_COMPARTMENTS]>,
}

impl<T: Real> ObservationSet<T> {
    /// Fails with `EmptyMask` when nothing at all is observed, and with
    /// `GridMismatch` when the row count disagrees with the grid.
    pub fn new(grid: TimeGrid, values: Vec<[Option<T>; N_COMPARTMENTS]>) -> Result<Self> {
        let expected = grid.n_observations()?;
        if values.len() != expected {
            return Err(Error::GridMismatch(format!("{} rows for {} observation times", values.len(), expected)));
        }
        if values.iter().all(|row| row.iter().all(Option::is_none)) {
            return Err(Error::EmptyMask(0));
        }
        Ok(Self { grid, values })
    }

    /// Every compartment observed at every time.
    pub fn from_trajectory(traj: &Trajectory<T>) -> Result<Self> {
        let values = traj.states.iter().map(|s| s.to_array().map(Some)).collect();
        Self::new(traj.grid, values)
    }

    /// Hides every compartment whose `observed` flag is false.
    pub fn with_compartment_mask(&self, observed: [bool; N_COMPARTMENTS]) -> Result<Self> {
        let values = self
            .values
            .iter()
            .map(|row| {
                let mut r = *row;
                for c in 0..N_COMPARTMENTS {
                    if !observed[c] {
                        r[c] = None;
                    }
                }
                r
            })
            .collect();
        Self::new(self.grid, values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, t: usize) -> &[Option<T>; N_COMPARTMENTS] {
        &self.values[t]
    }

    pub fn rows(&self) -> &[[Option<T>; N_COMPARTMENTS]] {
        &self.values
    }

    pub fn value(&self, t: usize, c: usize) -> Option<T> {
        self.values[t][c]
    }

    pub fn is_observed(&self, t: usize, c: usize) -> bool {
        self.values[t][c].is_some()
    }

    /// Compartments observed at one or more times.
    pub fn observed_compartments(&self) -> [bool; N_COMPARTMENTS] {
        let mut out = [false; N_COMPARTMENTS];
        for row in &self.values {
            for c in 0..N_COMPARTMENTS {
                out[c] |= row[c].is_some();
            }
        }
        out
    }

    /// Number of time points with at least one observed entry; the `T` of the
    /// per-time normalization.
    pub fn n_observed_times(&self) -> usize {
        self.values.iter().filter(|r| r.iter().any(Option::is_some)).count()
    }
}

/// Objective value with its per-time breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricValue<T> {
    pub value: T,
    pub per_time: Vec<T>,
}

impl<T: Real> MetricValue<T> {
    /// `log10(-value)`, the log mean squared error.
    pub fn log10_mse(&self) -> T {
        (-self.value).log10()
    }
}

/// `-(1/T) sum_{observed i} (d_i - y_i)^2` at one time point.
pub fn neg_se_at_t<T: Real>(sim: &[T; N_COMPARTMENTS], obs: &[Option<T>; N_COMPARTMENTS], t_count: usize) -> Result<T> {
    let mut sum = T::zero();
    let mut any = false;
    for (y, d) in sim.iter().zip(obs) {
        if let Some(d) = d {
            let r = *d - *y;
            sum += r * r;
            any = true;
        }
    }
    if !any {
        return Err(Error::EmptyMask(0));
    }
    Ok(-sum / T::from_usize(t_count).unwrap())
}

/// Objective over raw state rows aligned with `obs`. Unobserved time points
/// contribute a zero entry to the breakdown.
pub fn objective_rows<T: Real>(sim: &[[T; N_COMPARTMENTS]], obs: &ObservationSet<T>) -> Result<MetricValue<T>> {
    if sim.len() != obs.len() {
        return Err(Error::GridMismatch(format!("{} simulated rows vs {} observed", sim.len(), obs.len())));
    }
    let t_count = obs.n_observed_times();
    let mut per_time = Vec::with_capacity(sim.len());
    for (t, (y, d)) in sim.iter().zip(obs.rows()).enumerate() {
        if d.iter().all(Option::is_none) {
            per_time.push(T::zero());
            continue;
        }
        per_time.push(neg_se_at_t(y, d, t_count).map_err(|_| Error::EmptyMask(t))?);
    }
    let value = per_time.iter().copied().sum();
    Ok(MetricValue { value, per_time })
}

/// `sum_t neg_se_at_t(traj[t], obs[t], T)` over a shared grid.
pub fn objective<T: Real>(traj: &Trajectory<T>, obs: &ObservationSet<T>) -> Result<MetricValue<T>> {
    let a = traj.grid.observation_times()?;
    let b = obs.grid.observation_times()?;
    if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9) {
        return Err(Error::GridMismatch(format!("{} vs {} observation times", a.len(), b.len())));
    }
    let rows: Vec<[T; N_COMPARTMENTS]> = traj.states.iter().map(|s: &CompartmentState<T>| s.to_array()).collect();
    objective_rows(&rows, obs)
}
