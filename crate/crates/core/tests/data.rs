use std::fs;
use std::io::Write;

use chrono::NaiveDate;
use epicalib::data::{
    eval_against_truth, lambda_path, load_covid_csv, load_covid_window, make_scenario, write_covid_csv, GroundTruth, ObservationMask,
    RealSeries, ScenarioSpec, TRUE_LINEAR,
};
use epicalib::Error;

fn csv_file(body: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(body.as_bytes()).unwrap();
    f
}

fn day(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

#[test]
fn nonlinear_lambda_matches_pointwise_formula() {
    let spec = ScenarioSpec { ground_truth: GroundTruth::Nonlinear, ..Default::default() };
    let s = make_scenario(&spec).unwrap();
    let path = lambda_path(&GroundTruth::Nonlinear.rate_spec(), &s.truth).unwrap();
    for (st, l) in s.truth.states.iter().zip(&path) {
        let expected = (1.0 + 0.3 * st.i + 0.06 * st.s + 0.12 * st.r).ln() * st.i;
        assert!((l - expected).abs() <= 1e-15, "{l} vs {expected}");
    }
}

#[test]
fn perturbed_parameters_score_as_recomputed() {
    let s = make_scenario(&ScenarioSpec::default()).unwrap();
    let x = [0.12, 0.85, 0.25, 0.18];
    let sim = s.simulator().trajectory(&x).unwrap();
    let mut total = 0.0;
    for (a, b) in sim.states.iter().zip(&s.truth.states) {
        for (u, v) in a.to_array().iter().zip(b.to_array()) {
            total += (u - v).powi(2);
        }
    }
    let expected = (total / 30.0).log10();
    assert!((eval_against_truth(&x, &s).unwrap() - expected).abs() < 1e-12);
    assert!(eval_against_truth(&TRUE_LINEAR, &s).unwrap() < expected);
}

#[test]
fn noise_has_the_requested_spread() {
    let spec = ScenarioSpec { ground_truth: GroundTruth::NoisyLinear, seed: 11, ..Default::default() };
    let s = make_scenario(&spec).unwrap();
    let resid: Vec<f64> = (0..s.observations.len())
        .flat_map(|t| (0..4).map(move |c| (t, c)))
        .map(|(t, c)| s.observations.value(t, c).unwrap() - s.clean.value(t, c).unwrap())
        .collect();
    let n = resid.len() as f64;
    let mean = resid.iter().sum::<f64>() / n;
    let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert_eq!(resid.len(), 120);
    assert!(mean.abs() < 0.003, "{mean}");
    assert!((0.0075..0.0125).contains(&sd), "{sd}");
}

#[test]
fn stride_three_observes_ten_days() {
    let spec = ScenarioSpec { stride: 3, mask: ObservationMask::HideSusceptible, ..Default::default() };
    let s = make_scenario(&spec).unwrap();
    assert_eq!(s.observations.len(), 10);
    assert_eq!(s.targets().unwrap().observed_compartments(), vec![false, true, true, true]);
}

#[test]
fn csv_window_selects_country_and_dates() {
    let f = csv_file("date,country,infectious\n2020-01-01,A,5\n2020-01-02,B,7\n2020-01-02,A,6\n2020-01-03,A,8\n2020-01-04,A,9\n");
    let s = load_covid_window(f.path(), "A", day(2020, 1, 2), 2).unwrap();
    assert_eq!(s.infectious, vec![6.0, 8.0]);
    assert_eq!(s.dates, vec![day(2020, 1, 2), day(2020, 1, 3)]);
    assert_eq!(s.i0(), 6.0);
}

#[test]
fn csv_gap_lists_missing_dates() {
    let f = csv_file("date,country,infectious\n2020-01-01,A,5\n2020-01-03,A,8\n");
    match load_covid_window(f.path(), "A", day(2020, 1, 1), 4) {
        Err(Error::GapInSeries(d)) => assert_eq!(d, vec![day(2020, 1, 2), day(2020, 1, 4)]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn csv_duplicate_and_bad_rows() {
    let f = csv_file("date,country,infectious\n2020-01-01,A,5\n2020-01-01,A,6\n");
    assert!(matches!(load_covid_window(f.path(), "A", day(2020, 1, 1), 1), Err(Error::MalformedRow { line: 3, .. })));
    let f = csv_file("date,country,infectious\n2020-01-01,A,-1\n");
    assert!(matches!(load_covid_window(f.path(), "A", day(2020, 1, 1), 1), Err(Error::MalformedRow { line: 2, .. })));
    let f = csv_file("date,country,infectious\n2020-13-01,A,1\n");
    assert!(matches!(load_covid_window(f.path(), "A", day(2020, 1, 1), 1), Err(Error::MalformedRow { .. })));
    let f = csv_file("day,place,count\n");
    assert!(matches!(load_covid_window(f.path(), "A", day(2020, 1, 1), 1), Err(Error::MalformedRow { line: 1, .. })));
    let f = csv_file("date,country,infectious\n2020-01-01,A,1\n");
    assert!(matches!(load_covid_window(f.path(), "B", day(2020, 1, 1), 1), Err(Error::MissingCountry(_))));
}

#[test]
fn csv_round_trip_over_default_window() {
    let dates: Vec<NaiveDate> = (0..365).map(|k| day(2020, 6, 1) + chrono::Duration::days(k)).collect();
    let series = RealSeries {
        country: "Testland".into(),
        infectious: (0..365).map(|k| 100.0 + (k as f64 * 0.1).sin() * 40.0 + 0.25).collect(),
        dates,
    };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.csv");
    write_covid_csv(&series, &p).unwrap();
    assert_eq!(load_covid_csv(&p, "Testland").unwrap(), series);
    let text = fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 366);
}
