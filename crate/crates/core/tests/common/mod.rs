//! Independent reference computations shared by the integration tests.

#![allow(dead_code)]

use epicalib::funcnet::{FitSettings, FunctionNetwork, HistoryPoint, MetricTargets, NetworkSurrogate, SurrogateMode};
use epicalib::gp::{KernelHyperparams, TargetScaling};

/// Dense exact GP posterior from explicit formulas, used to check the
/// library's incremental machinery.
pub struct ReferenceGp {
    xs: Vec<Vec<f64>>,
    resid: Vec<f64>,
    kinv: Vec<Vec<f64>>,
    hyper: KernelHyperparams<f64>,
    scale: f64,
    offset: f64,
}

fn matern(a: &[f64], b: &[f64], h: &KernelHyperparams<f64>) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(&h.lengthscales).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
    let r = r2.sqrt();
    let s5 = 5f64.sqrt();
    h.signal_variance * (1.0 + s5 * r + 5.0 * r2 / 3.0) * (-s5 * r).exp()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let p = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, p);
        let piv = m[col][col];
        for v in m[col].iter_mut() {
            *v /= piv;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                let src = m[col].clone();
                for (v, s) in m[r].iter_mut().zip(&src) {
                    *v -= f * s;
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

impl ReferenceGp {
    pub fn new(xs: &[Vec<f64>], ys: &[f64], hyper: &KernelHyperparams<f64>) -> Self {
        let ts = TargetScaling::from_values(ys);
        let n = xs.len();
        let k: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| matern(&xs[i], &xs[j], hyper) + if i == j { hyper.noise_jitter } else { 0.0 }).collect())
            .collect();
        let resid = ys.iter().map(|y| ts.standardize(*y) - hyper.mean_const).collect();
        Self { xs: xs.to_vec(), resid, kinv: invert(&k), hyper: hyper.clone(), scale: ts.scale, offset: ts.offset }
    }

    /// Raw-unit posterior means and covariance at `points`.
    pub fn joint(&self, points: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = self.xs.len();
        let kq: Vec<Vec<f64>> = points.iter().map(|p| self.xs.iter().map(|x| matern(p, x, &self.hyper)).collect()).collect();
        let means = kq
            .iter()
            .map(|k| {
                let m: f64 = (0..n).map(|i| k[i] * (0..n).map(|j| self.kinv[i][j] * self.resid[j]).sum::<f64>()).sum();
                self.offset + self.scale * (self.hyper.mean_const + m)
            })
            .collect();
        let cov = (0..points.len())
            .map(|a| {
                (0..points.len())
                    .map(|b| {
                        let mut c = matern(&points[a], &points[b], &self.hyper);
                        for i in 0..n {
                            for j in 0..n {
                                c -= kq[a][i] * self.kinv[i][j] * kq[b][j];
                            }
                        }
                        self.scale * self.scale * c
                    })
                    .collect()
            })
            .collect();
        (means, cov)
    }

    /// Raw-unit jitter, the extra variance used in fantasy conditioning.
    pub fn raw_jitter(&self) -> f64 {
        self.scale * self.scale * self.hyper.noise_jitter
    }
}

/// Integrates `f` against the standard normal density on a dense grid.
pub fn normal_expectation(f: impl Fn(f64) -> f64, n: usize) -> f64 {
    let (lo, hi) = (-9.0, 9.0);
    let h = (hi - lo) / n as f64;
    let c = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    (0..=n)
        .map(|i| {
            let e = lo + h * i as f64;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * h * c * (-0.5 * e * e).exp() * f(e)
        })
        .sum()
}

pub fn toy_output(c: usize, x: f64) -> f64 {
    match c {
        0 => 0.5 + 0.3 * (6.0 * x).sin(),
        _ => 0.2 + 0.25 * (4.0 * x + 1.0).cos(),
    }
}

/// One-dimensional, one-time-point surrogate over `m` independent outputs.
pub fn toy_surrogate(m: usize, xs: &[f64]) -> (NetworkSurrogate, Vec<HistoryPoint>) {
    let history: Vec<HistoryPoint> =
        xs.iter().map(|&x| HistoryPoint { x: vec![x], outputs: (0..m).map(|c| vec![toy_output(c, x)]).collect() }).collect();
    let s = NetworkSurrogate::fit(&history, &FunctionNetwork::independent(m), SurrogateMode::CompositeOnly, &FitSettings::default(), None)
        .unwrap();
    (s, history)
}

pub fn toy_targets(d: &[f64]) -> MetricTargets {
    MetricTargets::new(d.iter().map(|v| vec![Some(*v)]).collect()).unwrap()
}

/// Reference GP of compartment `c` of a toy surrogate.
pub fn reference_for(s: &NetworkSurrogate, history: &[HistoryPoint], c: usize) -> ReferenceGp {
    let xs: Vec<Vec<f64>> = history.iter().map(|h| h.x.clone()).collect();
    let ys: Vec<f64> = history.iter().map(|h| h.outputs[c][0]).collect();
    ReferenceGp::new(&xs, &ys, s.hyperparameters()[c].as_ref().unwrap())
}

/// Exact knowledge gradient on a discrete domain for independent outputs,
/// conditioning the outputs flagged in `z`; the fantasy expectation is a
/// dense tensor-product quadrature.
pub fn discrete_kg_oracle(refs: &[ReferenceGp], d: &[f64], x: f64, points: &[f64], z: &[bool]) -> f64 {
    let mut all = vec![vec![x]];
    all.extend(points.iter().map(|p| vec![*p]));
    let joints: Vec<(Vec<f64>, Vec<Vec<f64>>)> = refs.iter().map(|r| r.joint(&all)).collect();
    let value = |c: usize, p: usize, e: Option<f64>| -> f64 {
        let (mu, cov) = &joints[c];
        let (mut m, mut v) = (mu[p + 1], cov[p + 1][p + 1]);
        if let Some(e) = e {
            let s2 = cov[0][0] + refs[c].raw_jitter();
            let y = mu[0] + cov[0][0].sqrt() * e;
            m += cov[0][p + 1] / s2 * (y - mu[0]);
            v -= cov[0][p + 1].powi(2) / s2;
        }
        -((d[c] - m).powi(2) + v)
    };
    let current = (0..points.len()).map(|p| (0..refs.len()).map(|c| value(c, p, None)).sum::<f64>()).fold(f64::NEG_INFINITY, f64::max);
    let selected: Vec<usize> = (0..refs.len()).filter(|&c| z[c]).collect();
    let after = |es: &[f64]| -> f64 {
        (0..points.len())
            .map(|p| {
                (0..refs.len())
                    .map(|c| value(c, p, selected.iter().position(|&s| s == c).map(|i| es[i])))
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let expected = match selected.len() {
        1 => normal_expectation(|e| after(&[e]), 4000),
        2 => normal_expectation(|a| normal_expectation(|b| after(&[a, b]), 600), 600),
        _ => panic!("oracle supports one or two conditioned outputs"),
    };
    z.len() as f64 / selected.len() as f64 * (expected - current)
}
