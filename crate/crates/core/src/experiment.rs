//! Config-driven batches of calibration runs and their on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{AcquisitionKind, AcquisitionSpec};
use crate::calibrate::{run_bo, BoRun, BoSettings, Stage2Data, Stage2Params, TwoStageConfig, TwoStageResult};
use crate::data::{eval_against_truth, initial_state, lambda_path, load_covid_csv, make_scenario, ScenarioSpec};
use crate::error::{Error, Result};
use crate::funcnet::FunctionNetwork;
use crate::neural::Mlp;
use crate::ode::{simulate, CompartmentState, RateSpec, TimeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Every third day observed (10 time points over 30 days).
    Fast,
    /// Daily observations.
    Full,
}

impl Profile {
    pub fn stride(self) -> usize {
        match self {
            Profile::Fast => 3,
            Profile::Full => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Profile::Fast),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config { field: "profile".into(), reason: format!("expected fast or full, got {other:?}") }),
        }
    }
}

/// Acquisition settings shared by every method of a batch; `kind` comes
/// from the method list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionOverrides {
    pub k: usize,
    pub l: usize,
    pub restarts: usize,
    pub raw_samples: usize,
    pub outer_max_iters: usize,
    pub inner_restarts: usize,
    pub inner_max_iters: usize,
    pub z_subsets: Vec<Vec<bool>>,
    pub full_z_enumeration: bool,
    /// Used instead of `l` for network-mode surrogates, whose expected
    /// metric is estimated by explicit sampling.
    pub l_network: Option<usize>,
}

impl Default for AcquisitionOverrides {
    fn default() -> Self {
        let d = AcquisitionSpec::default();
        Self {
            k: d.k,
            l: d.l,
            restarts: d.restarts,
            raw_samples: d.raw_samples,
            outer_max_iters: d.outer_max_iters,
            inner_restarts: d.inner_restarts,
            inner_max_iters: d.inner_max_iters,
            z_subsets: d.z_subsets,
            full_z_enumeration: d.full_z_enumeration,
            l_network: None,
        }
    }
}

impl AcquisitionOverrides {
    pub fn spec_for(&self, kind: AcquisitionKind) -> AcquisitionSpec {
        let l = match (kind, self.l_network) {
            (AcquisitionKind::KgFn, Some(l)) => l,
            _ => self.l,
        };
        AcquisitionSpec {
            kind,
            k: self.k,
            l,
            restarts: self.restarts,
            raw_samples: self.raw_samples,
            outer_max_iters: self.outer_max_iters,
            inner_restarts: self.inner_restarts,
            inner_max_iters: self.inner_max_iters,
            z_subsets: self.z_subsets.clone(),
            full_z_enumeration: self.full_z_enumeration,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealDataSource {
    pub path: PathBuf,
    pub country: String,
}

/// Synthetic two-stage target: infectious counts generated by a rate
/// network from `net_seed`, optionally with its output bias shifted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub days: usize,
    pub population: f64,
    pub initial_infectious: f64,
    pub coeffs: [f64; 3],
    pub net_seed: u64,
    pub bias_shift: f64,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self { days: 120, population: 1e6, initial_infectious: 1e4, coeffs: [0.9, 0.2, 0.2], net_seed: 1000, bias_shift: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Option<ScenarioSpec>,
    pub real_data: Option<RealDataSource>,
    pub synthetic: Option<SyntheticSource>,
    pub methods: Vec<AcquisitionKind>,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    pub acquisition: AcquisitionOverrides,
    pub fit_restarts: usize,
    pub loop_fit_restarts: usize,
    pub profile: Profile,
    pub output_dir: PathBuf,
    pub network: String,
    pub record_wall_time: bool,
    pub twostage: TwoStageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bo = BoSettings::default();
        Self {
            scenario: None,
            real_data: None,
            synthetic: None,
            methods: AcquisitionKind::ALL.to_vec(),
            iterations: bo.iterations,
            seeds: (0..5).collect(),
            acquisition: AcquisitionOverrides::default(),
            fit_restarts: bo.initial_fit_restarts,
            loop_fit_restarts: bo.loop_fit_restarts,
            profile: Profile::Fast,
            output_dir: PathBuf::from("out"),
            network: "siqr".into(),
            record_wall_time: false,
            twostage: TwoStageConfig::default(),
        }
    }
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config { field: field.into(), reason: reason.into() }
}

impl RunConfig {
    /// Parses JSON; syntax and schema problems carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err(&format!("line {} column {}", e.line(), e.column()), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(config_err("methods", "at least one method is required"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        FunctionNetwork::preset(&self.network).map_err(|e| config_err("network", e.to_string()))?;
        for kind in &self.methods {
            self.acquisition.spec_for(*kind).validate()?;
        }
        if let Some(s) = &self.scenario {
            s.validate()?;
        }
        if let Some(r) = &self.real_data {
            if !r.path.exists() {
                return Err(config_err("real_data.path", format!("{} does not exist", r.path.display())));
            }
        }
        Ok(())
    }

    /// The scenario with the profile's observation stride applied.
    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        let s = self.scenario.clone().ok_or_else(|| config_err("scenario", "a scenario is required for `run`"))?;
        Ok(ScenarioSpec { stride: self.profile.stride(), ..s })
    }

    pub fn bo_settings(&self) -> BoSettings {
        BoSettings {
            iterations: self.iterations,
            initial_fit_restarts: self.fit_restarts,
            loop_fit_restarts: self.loop_fit_restarts,
            record_wall_time: self.record_wall_time,
            ..BoSettings::default()
        }
    }

    pub fn run_dir(&self, kind: AcquisitionKind, seed: u64) -> PathBuf {
        self.output_dir.join(kind.name()).join(format!("seed_{seed}"))
    }
}

/// Shortest round-trip decimal form, so re-parsing gives the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn fmt_z(z: &Option<Vec<bool>>) -> String {
    z.as_ref().map(|z| z.iter().map(|b| if *b { '1' } else { '0' }).collect()).unwrap_or_default()
}

/// Per-query log: `iter,phase,x1..xD,z,acq,objective,best_logmse,wall_ms`.
pub fn write_run_log(run: &BoRun, path: &Path) -> Result<()> {
    let dim = run.x_best.len();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iter".to_string(), "phase".into()];
    header.extend((1..=dim).map(|j| format!("x{j}")));
    header.extend(["z", "acq", "objective", "best_logmse", "wall_ms"].map(String::from));
    w.write_record(&header)?;
    for r in &run.records {
        let mut row = vec![r.iter.to_string(), r.phase.name().to_string()];
        row.extend(r.x.iter().map(|v| fmt_f64(*v)));
        row.extend([fmt_z(&r.z), fmt_opt(r.acq), fmt_f64(r.objective), fmt_f64(r.best_logmse), fmt_opt(r.wall_ms)]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `best_logmse` column of a run log.
pub fn read_best_logmse(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "best_logmse")
        .ok_or_else(|| Error::MalformedRow { line: 1, reason: "no best_logmse column".into() })?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            rec[col].parse::<f64>().map_err(|e| Error::MalformedRow { line, reason: e.to_string() })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: AcquisitionKind,
    pub seed: u64,
    pub queries: usize,
    pub x_best: Vec<f64>,
    pub u_best: f64,
    /// `log10` MSE of the recommendation against the noiseless observations.
    pub final_logmse: f64,
    pub best_observed_logmse: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `method,iter,n,mean_best_logmse,sd_best_logmse` rows from per-seed
/// `best_logmse` curves of equal length.
pub fn aggregate_rows(curves: &[(AcquisitionKind, Vec<Vec<f64>>)]) -> Result<Vec<Vec<String>>> {
    let mut rows = Vec::new();
    for (kind, per_seed) in curves {
        let len = per_seed.first().map_or(0, Vec::len);
        if per_seed.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidArgument(format!("{kind}: run logs have different lengths")));
        }
        for t in 0..len {
            let vals: Vec<f64> = per_seed.iter().map(|c| c[t]).collect();
            let (m, s) = mean_sd(&vals);
            rows.push(vec![kind.name().to_string(), t.to_string(), vals.len().to_string(), fmt_f64(m), fmt_f64(s)]);
        }
    }
    Ok(rows)
}

pub const AGGREGATE_HEADER: [&str; 5] = ["method", "iter", "n", "mean_best_logmse", "sd_best_logmse"];

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutcome {
    pub summaries: Vec<RunSummary>,
    pub failures: Vec<(AcquisitionKind, u64, String)>,
}

/// Runs every (method, seed) pair of a scenario config and writes run logs,
/// summaries, `aggregate.csv` and `final.csv` under the output directory.
pub fn run_batch(config: &RunConfig) -> Result<BatchOutcome> {
    config.validate()?;
    let spec = config.scenario_spec()?;
    let network = FunctionNetwork::preset(&config.network)?;
    let settings = config.bo_settings();
    fs::create_dir_all(&config.output_dir)?;
    fs::write(config.output_dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    let jobs: Vec<(AcquisitionKind, u64)> = config.methods.iter().flat_map(|k| config.seeds.iter().map(move |s| (*k, *s))).collect();
    let results: Vec<Result<RunSummary>> = jobs
        .par_iter()
        .map(|&(kind, seed)| {
            let scenario = make_scenario(&ScenarioSpec { seed: spec.seed.wrapping_add(seed), ..spec.clone() })?;
            let targets = scenario.targets()?;
            let acq = config.acquisition.spec_for(kind);
            let run = run_bo(&scenario.simulator(), &targets, &network, &acq, &settings, seed)?;
            let dir = config.run_dir(kind, seed);
            fs::create_dir_all(&dir)?;
            write_run_log(&run, &dir.join("log.csv"))?;
            let summary = RunSummary {
                method: kind,
                seed,
                queries: run.queries(),
                final_logmse: eval_against_truth(&run.x_best, &scenario)?,
                best_observed_logmse: run.records.last().map_or(f64::NAN, |r| r.best_logmse),
                x_best: run.x_best,
                u_best: run.u_best,
            };
            fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            log::info!("{kind} seed {seed}: final log10 MSE {:.3}", summary.final_logmse);
            Ok(summary)
        })
        .collect();
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for ((kind, seed), r) in jobs.iter().zip(results) {
        match r {
            Ok(s) => summaries.push(s),
            Err(e) => {
                log::error!("{kind} seed {seed} failed: {e}");
                failures.push((*kind, *seed, e.to_string()));
            }
        }
    }
    write_aggregates(config, &summaries)?;
    Ok(BatchOutcome { summaries, failures })
}

fn curves_from_logs(config: &RunConfig, summaries: &[RunSummary]) -> Result<Vec<(AcquisitionKind, Vec<Vec<f64>>)>> {
    let mut out = Vec::new();
    for kind in &config.methods {
        let mut per_seed = Vec::new();
        for s in summaries.iter().filter(|s| s.method == *kind) {
            per_seed.push(read_best_logmse(&config.run_dir(*kind, s.seed).join("log.csv"))?);
        }
        if !per_seed.is_empty() {
            out.push((*kind, per_seed));
        }
    }
    Ok(out)
}

fn final_rows(summaries: &[RunSummary]) -> Vec<Vec<String>> {
    summaries
        .iter()
        .map(|s| {
            let x = s.x_best.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(";");
            vec![s.method.name().to_string(), s.seed.to_string(), s.queries.to_string(), x, fmt_f64(s.u_best), fmt_f64(s.final_logmse)]
        })
        .collect()
}

pub const FINAL_HEADER: [&str; 6] = ["method", "seed", "queries", "x_best", "u_best", "final_logmse"];

fn write_aggregates(config: &RunConfig, summaries: &[RunSummary]) -> Result<()> {
    let curves = curves_from_logs(config, summaries)?;
    write_rows(&config.output_dir.join("aggregate.csv"), &AGGREGATE_HEADER, &aggregate_rows(&curves)?)?;
    write_rows(&config.output_dir.join("final.csv"), &FINAL_HEADER, &final_rows(summaries))?;
    Ok(())
}

/// Recomputes `aggregate.csv` from the per-run logs and compares it with the
/// stored file byte for byte. Returns the mismatching line numbers.
pub fn verify_outputs(dir: &Path) -> Result<Vec<usize>> {
    let config = RunConfig::load(&dir.join("config.json"))?;
    let config = RunConfig { output_dir: dir.to_path_buf(), ..config };
    let mut summaries = Vec::new();
    for kind in &config.methods {
        for seed in &config.seeds {
            let p = config.run_dir(*kind, *seed).join("summary.json");
            if p.exists() {
                summaries.push(serde_json::from_str::<RunSummary>(&fs::read_to_string(p)?)?);
            }
        }
    }
    let curves = curves_from_logs(&config, &summaries)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(AGGREGATE_HEADER)?;
    for r in aggregate_rows(&curves)? {
        w.write_record(&r)?;
    }
    let fresh = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv output is UTF-8");
    let stored = fs::read_to_string(dir.join("aggregate.csv"))?;
    let a: Vec<&str> = fresh.lines().collect();
    let b: Vec<&str> = stored.lines().collect();
    let mut bad: Vec<usize> = (0..a.len().min(b.len())).filter(|&i| a[i] != b[i]).map(|i| i + 1).collect();
    if a.len() != b.len() {
        bad.push(a.len().min(b.len()) + 1);
    }
    Ok(bad)
}

/// Writes the two-stage artifacts: stage-1 log, stage-2 loss curve, fitted
/// trajectories and a JSON summary.
pub fn write_two_stage(result: &TwoStageResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_run_log(&result.stage1, &dir.join("stage1_log.csv"))?;
    let loss_rows: Vec<Vec<String>> = result
        .stage2
        .as_ref()
        .map(|s| s.losses.iter().enumerate().map(|(i, l)| vec![i.to_string(), fmt_f64(*l)]).collect())
        .unwrap_or_default();
    write_rows(&dir.join("stage2_loss.csv"), &["step", "loss"], &loss_rows)?;
    let traj_rows: Vec<Vec<String>> = (0..result.observed.len())
        .map(|d| {
            vec![
                d.to_string(),
                fmt_f64(result.observed[d]),
                fmt_f64(result.stage1_fit[d]),
                fmt_opt(result.stage2_fit.as_ref().map(|f| f[d])),
            ]
        })
        .collect();
    write_rows(&dir.join("trajectory.csv"), &["day", "observed", "stage1", "stage2"], &traj_rows)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        x_first: &'a [f64; 6],
        coeffs_second: Option<[f64; 3]>,
        stage1_mse: f64,
        stage2_mse: Option<f64>,
        stage2_initial_window_loss: Option<f64>,
        stage2_final_window_loss: Option<f64>,
        stage2_diverged: bool,
    }
    let s2 = result.stage2.as_ref();
    let summary = Summary {
        x_first: &result.x_first,
        coeffs_second: s2.map(|s| s.params.coeffs),
        stage1_mse: result.stage1_mse(),
        stage2_mse: result.stage2_mse(),
        stage2_initial_window_loss: s2.map(|s| s.initial_loss),
        stage2_final_window_loss: s2.map(|s| s.final_loss),
        stage2_diverged: s2.is_none(),
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

/// Infectious counts for a two-stage run from the config's data source.
pub fn two_stage_counts(config: &RunConfig) -> Result<Vec<f64>> {
    match (&config.real_data, &config.synthetic) {
        (Some(r), _) => {
            if !r.path.exists() {
                return Err(config_err("real_data.path", format!("{} does not exist", r.path.display())));
            }
            Ok(load_covid_csv(&r.path, &r.country)?.infectious)
        }
        (None, Some(s)) => synthetic_counts(s),
        (None, None) => Err(config_err("real_data", "twostage needs real_data or synthetic")),
    }
}

/// The generating parameters and the daily compartment fractions from day 0
/// of a synthetic network-model target.
pub fn synthetic_target(s: &SyntheticSource) -> Result<(Stage2Params, Stage2Data)> {
    use rand::SeedableRng;
    if s.days < 2 || !(s.initial_infectious > 0.0 && s.population > s.initial_infectious) {
        return Err(config_err("synthetic", "needs at least 2 days and 0 < initial_infectious < population"));
    }
    let mut net = Mlp::lambda_net(&mut rand_chacha::ChaCha8Rng::seed_from_u64(s.net_seed));
    let mut p = net.params();
    let last = p.len() - 1;
    p[last] += s.bias_shift;
    net.set_params(&p)?;
    let model = Stage2Params { net, coeffs: s.coeffs };
    let i0 = s.initial_infectious / s.population;
    let grid = TimeGrid::daily_with_initial((s.days - 1) as f64, 1).with_dt(0.25);
    let traj = simulate(&model.rate_spec(), &CompartmentState::new(1.0 - i0, i0, 0.0, 0.0), &grid)?;
    let data = Stage2Data {
        infectious: traj.compartment(1),
        susceptible: traj.compartment(0),
        quarantined: traj.compartment(2),
        recovered: traj.compartment(3),
    };
    Ok((model, data))
}

/// Daily infectious persons from day 0 under the synthetic network model.
pub fn synthetic_counts(s: &SyntheticSource) -> Result<Vec<f64>> {
    let (_, data) = synthetic_target(s)?;
    Ok(data.infectious.iter().map(|v| v * s.population).collect())
}

/// `t,S,I,Q,R[,lambda]` rows at every day from 0 to `horizon`.
pub fn write_simulation<W: std::io::Write>(spec: &RateSpec<f64>, horizon: f64, emit_lambda: bool, out: W) -> Result<()> {
    let grid = TimeGrid::daily_with_initial(horizon, 1);
    let traj = simulate(spec, &initial_state(), &grid)?;
    let times = grid.observation_times()?;
    let lambda = if emit_lambda { Some(lambda_path(spec, &traj)?) } else { None };
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t", "S", "I", "Q", "R"];
    if emit_lambda {
        header.push("lambda");
    }
    w.write_record(&header)?;
    for (k, st) in traj.states.iter().enumerate() {
        let mut row = vec![fmt_f64(times[k])];
        row.extend(st.to_array().iter().map(|v| fmt_f64(*v)));
        if let Some(l) = &lambda {
            row.push(fmt_f64(l[k]));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
