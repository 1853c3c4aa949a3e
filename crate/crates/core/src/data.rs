//! Synthetic scenarios and infectious-count time series ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibrate::Simulator;
use crate::error::{Error, Result};
use crate::funcnet::MetricTargets;
use crate::metrics::{objective, ObservationSet};
use crate::ode::{eval_rates, simulate, CompartmentState, RateSpec, TimeGrid, Trajectory, N_COMPARTMENTS};

pub const NONLINEAR_COEFFS: [f64; 3] = [0.3, 0.06, 0.12];
pub const TRUE_LINEAR: [f64; 4] = [0.1, 0.9, 0.2, 0.2];
pub const DEFAULT_NOISE_SD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    Linear,
    NoisyLinear,
    Nonlinear,
}

impl GroundTruth {
    pub fn rate_spec(self) -> RateSpec<f64> {
        let [l, b, d, g] = TRUE_LINEAR;
        match self {
            Self::Linear | Self::NoisyLinear => RateSpec::Linear { lambda: l, beta: b, delta: d, gamma: g },
            Self::Nonlinear => RateSpec::LogNonlinear { lambda: NONLINEAR_COEFFS, beta: b, delta: d, gamma: g },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMask {
    Full,
    HideSusceptible,
}

impl ObservationMask {
    pub fn observed(self) -> [bool; N_COMPARTMENTS] {
        match self {
            Self::Full => [true; N_COMPARTMENTS],
            Self::HideSusceptible => [false, true, true, true],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub ground_truth: GroundTruth,
    /// Population-fraction units; `None` means 0.01 for the noisy scenario
    /// and 0 otherwise.
    pub noise_sd: Option<f64>,
    pub mask: ObservationMask,
    pub horizon: f64,
    /// Observe every `stride`-th day.
    pub stride: usize,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self { ground_truth: GroundTruth::Linear, noise_sd: None, mask: ObservationMask::Full, horizon: 30.0, stride: 1, seed: 0 }
    }
}

impl ScenarioSpec {
    pub fn effective_noise_sd(&self) -> f64 {
        self.noise_sd.unwrap_or(if self.ground_truth == GroundTruth::NoisyLinear { DEFAULT_NOISE_SD } else { 0.0 })
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::daily(self.horizon, self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        let sd = self.effective_noise_sd();
        if !(sd >= 0.0 && sd.is_finite()) {
            return Err(Error::Config { field: "noise_sd".into(), reason: "must be finite and non-negative".into() });
        }
        self.grid().validate()
    }
}

pub fn initial_state() -> CompartmentState<f64> {
    CompartmentState::new(0.99, 0.01, 0.0, 0.0)
}

/// A generated calibration problem. `truth` and `clean` are for evaluation
/// only.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub observations: ObservationSet<f64>,
    pub truth: Trajectory<f64>,
    /// Noiseless observations under the same mask.
    pub clean: ObservationSet<f64>,
}

impl Scenario {
    pub fn targets(&self) -> Result<MetricTargets> {
        MetricTargets::from_observations(&self.observations)
    }

    pub fn simulator(&self) -> ScenarioSimulator {
        ScenarioSimulator { grid: self.spec.grid(), init: initial_state() }
    }
}

pub fn make_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let grid = spec.grid();
    let truth = simulate(&spec.ground_truth.rate_spec(), &initial_state(), &grid)?;
    let observed = spec.mask.observed();
    let clean = ObservationSet::from_trajectory(&truth)?.with_compartment_mask(observed)?;
    let sd = spec.effective_noise_sd();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let values = truth
        .states
        .iter()
        .map(|s| {
            let v = s.to_array();
            std::array::from_fn(|c| {
                let e = if sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                observed[c].then_some(v[c] + e)
            })
        })
        .collect();
    let observations = ObservationSet::new(grid, values)?;
    Ok(Scenario { spec: spec.clone(), observations, truth, clean })
}

/// `lambda(t)` of a rate spec along a trajectory.
pub fn lambda_path(spec: &RateSpec<f64>, traj: &Trajectory<f64>) -> Result<Vec<f64>> {
    traj.states.iter().map(|s| eval_rates(s, spec).map(|r| r.lambda)).collect()
}

/// Linear-rate SIQR on the unit cube, outputs `[compartment][time]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSimulator {
    pub grid: TimeGrid,
    pub init: CompartmentState<f64>,
}

impl ScenarioSimulator {
    pub fn trajectory(&self, x: &[f64]) -> Result<Trajectory<f64>> {
        simulate(&RateSpec::linear(x)?, &self.init, &self.grid)
    }
}

impl Simulator for ScenarioSimulator {
    fn dim(&self) -> usize {
        4
    }

    fn query(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let t = self.trajectory(x)?;
        Ok((0..N_COMPARTMENTS).map(|c| t.compartment(c)).collect())
    }
}

/// `log10` of the mean squared error of `eta(x)` against the noiseless,
/// masked observations.
pub fn eval_against_truth(x: &[f64], scenario: &Scenario) -> Result<f64> {
    let traj = scenario.simulator().trajectory(x)?;
    Ok(objective(&traj, &scenario.clean)?.log10_mse())
}

/// Daily infectious counts for one country.
#[derive(Clone, Debug, PartialEq)]
pub struct RealSeries {
    pub country: String,
    pub dates: Vec<NaiveDate>,
    pub infectious: Vec<f64>,
}

impl RealSeries {
    pub fn i0(&self) -> f64 {
        self.infectious[0]
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}

pub const SERIES_START: (i32, u32, u32) = (2020, 6, 1);
pub const SERIES_DAYS: usize = 365;

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    date: String,
    country: String,
    infectious: String,
}

/// The 365-day window from 2020-06-01 for `country`.
pub fn load_covid_csv(path: &Path, country: &str) -> Result<RealSeries> {
    let (y, m, d) = SERIES_START;
    load_covid_window(path, country, NaiveDate::from_ymd_opt(y, m, d).unwrap(), SERIES_DAYS)
}

/// Reads `date,country,infectious` rows and returns `days` consecutive
/// entries from `start` for `country`. Rows of other countries and dates
/// outside the window are ignored.
pub fn load_covid_window(path: &Path, country: &str, start: NaiveDate, days: usize) -> Result<RealSeries> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["date", "country", "infectious"] {
        return Err(Error::MalformedRow { line: 1, reason: "header must be date,country,infectious".into() });
    }
    let end = start + Duration::days(days as i64);
    let mut found_country = false;
    let mut rows: BTreeMap<NaiveDate, f64> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row: CsvRow = rec.deserialize(Some(&headers)).map_err(|e| Error::MalformedRow { line, reason: e.to_string() })?;
        if row.country != country {
            continue;
        }
        found_country = true;
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d")
            .map_err(|e| Error::MalformedRow { line, reason: format!("date {:?}: {e}", row.date) })?;
        let count: f64 = row
            .infectious
            .trim()
            .parse()
            .map_err(|_| Error::MalformedRow { line, reason: format!("count {:?} is not a number", row.infectious) })?;
        if !(count >= 0.0 && count.is_finite()) {
            return Err(Error::MalformedRow { line, reason: format!("count {count} is negative or not finite") });
        }
        if rows.contains_key(&date) {
            return Err(Error::MalformedRow { line, reason: format!("duplicate date {date}") });
        }
        if date >= start && date < end {
            rows.insert(date, count);
        }
    }
    if !found_country {
        return Err(Error::MissingCountry(country.to_string()));
    }
    let dates: Vec<NaiveDate> = (0..days as i64).map(|k| start + Duration::days(k)).collect();
    let missing: Vec<NaiveDate> = dates.iter().filter(|d| !rows.contains_key(d)).copied().collect();
    if !missing.is_empty() {
        return Err(Error::GapInSeries(missing));
    }
    Ok(RealSeries { country: country.to_string(), infectious: dates.iter().map(|d| rows[d]).collect(), dates })
}

pub fn write_covid_csv(series: &RealSeries, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "country", "infectious"])?;
    for (d, v) in series.dates.iter().zip(&series.infectious) {
        w.write_record([d.format("%Y-%m-%d").to_string(), series.country.clone(), format!("{v}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_full_scenario_is_the_trajectory() {
        let s = make_scenario(&ScenarioSpec::default()).unwrap();
        assert_eq!(s.observations.len(), 30);
        for (t, st) in s.truth.states.iter().enumerate() {
            assert_eq!(*s.observations.row(t), st.to_array().map(Some));
        }
    }

    #[test]
    fn hidden_susceptible_has_no_entries() {
        let spec = ScenarioSpec { mask: ObservationMask::HideSusceptible, ..Default::default() };
        let s = make_scenario(&spec).unwrap();
        assert!((0..s.observations.len()).all(|t| !s.observations.is_observed(t, 0)));
        assert_eq!(s.targets().unwrap().observed_compartments(), vec![false, true, true, true]);
    }

    #[test]
    fn truth_scores_as_exact() {
        let s = make_scenario(&ScenarioSpec::default()).unwrap();
        assert!(eval_against_truth(&TRUE_LINEAR, &s).unwrap() <= -12.0);
    }

    #[test]
    fn noise_is_seeded() {
        let spec = ScenarioSpec { ground_truth: GroundTruth::NoisyLinear, seed: 4, ..Default::default() };
        let a = make_scenario(&spec).unwrap();
        assert_eq!(a, make_scenario(&spec).unwrap());
        assert_ne!(a.observations, make_scenario(&ScenarioSpec { seed: 5, ..spec }).unwrap().observations);
        assert_ne!(a.observations, a.clean);
    }
}
