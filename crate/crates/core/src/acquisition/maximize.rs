use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::acquisition::bank::BaseSampleBank;
use crate::acquisition::kg::{baseline, dg_estimate, envelope_gradient, Baseline, InnerDomain, InnerObjective};
use crate::acquisition::spec::AcquisitionSpec;
use crate::error::{Error, Result};
use crate::gp::SurrogateNode;
use crate::optim::{maximize, AscentOptions, Bounds};

/// Next query and the acquisition value that selected it.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub x: Vec<f64>,
    pub z: Vec<bool>,
    pub value: f64,
}

/// Closed-form expected improvement over `best` for a Gaussian with the
/// given mean and standard deviation. Below `sd_floor` the improvement is
/// deterministic.
pub fn ei_from_moments(mean: f64, sd: f64, best: f64, sd_floor: f64) -> (f64, f64, f64) {
    if sd <= sd_floor {
        let imp = (mean - best).max(0.0);
        return (imp, if mean > best { 1.0 } else { 0.0 }, 0.0);
    }
    let n = Normal::standard();
    let u = (mean - best) / sd;
    let cdf = n.cdf(u);
    let pdf = n.pdf(u);
    // Value and partial derivatives in the mean and the standard deviation.
    ((mean - best) * cdf + sd * pdf, cdf, pdf)
}

fn sd_floor(node: &SurrogateNode<f64>) -> f64 {
    let s = node.target_scaling(0);
    s.scale * node.hyper().noise_jitter.sqrt()
}

/// Expected improvement of the node's first channel at `x`.
pub fn ei(node: &SurrogateNode<f64>, x: &[f64], best: f64) -> f64 {
    let (m, v) = node.posterior(x);
    ei_from_moments(m, v.sqrt(), best, sd_floor(node)).0
}

/// Expected improvement and its gradient in `x`.
pub fn ei_with_grad(node: &SurrogateNode<f64>, x: &[f64], best: f64) -> (f64, Vec<f64>) {
    let p = node.posterior_grad(x, 0);
    let sd = p.variance.sqrt();
    let (v, d_mean, d_sd) = ei_from_moments(p.mean, sd, best, sd_floor(node));
    let g = p
        .d_mean
        .iter()
        .zip(&p.d_variance)
        .map(|(dm, dv)| d_mean * dm + if sd > 0.0 { d_sd * dv / (2.0 * sd) } else { 0.0 })
        .collect();
    (v, g)
}

fn ties(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 + 1e-9 * a.abs().max(b.abs())
}

/// Index of the best value; near-equal values resolve to the lowest index.
pub fn argmax_with_ties(values: &[Option<f64>]) -> Option<usize> {
    let best = values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return None;
    }
    values.iter().position(|v| v.map_or(false, |v| ties(v, best)))
}

/// Scores every start, runs local ascent from the `restarts` best, and
/// returns the best point; ties resolve to the lowest start index.
pub fn multistart<F>(f: F, starts: &[Vec<f64>], restarts: usize, bounds: &Bounds, opts: &AscentOptions) -> Option<(Vec<f64>, f64)>
where
    F: Fn(&[f64], Option<&mut [f64]>) -> Option<f64>,
{
    let scores: Vec<Option<f64>> = starts.iter().map(|s| f(s, None).filter(|v| v.is_finite())).collect();
    let mut ranked: Vec<usize> = (0..starts.len()).filter(|&i| scores[i].is_some()).collect();
    ranked.sort_by(|&a, &b| scores[b].unwrap().total_cmp(&scores[a].unwrap()).then(a.cmp(&b)));
    let mut results: Vec<Option<(Vec<f64>, f64)>> = vec![None; starts.len()];
    for &i in ranked.iter().take(restarts) {
        let r = maximize(|x, g| f(x, Some(g)), &starts[i], bounds, opts);
        let start_value = scores[i].unwrap();
        results[i] = match r {
            Some(r) if r.value >= start_value => Some((r.x, r.value)),
            _ => Some((starts[i].clone(), start_value)),
        };
    }
    for &i in ranked.iter().skip(restarts) {
        results[i] = Some((starts[i].clone(), scores[i].unwrap()));
    }
    let values: Vec<Option<f64>> = results.iter().map(|r| r.as_ref().map(|(_, v)| *v)).collect();
    let best = argmax_with_ties(&values)?;
    results[best].take()
}

fn start_list(bank: &BaseSampleBank, bounds: &Bounds, incumbent: Option<&[f64]>) -> Vec<Vec<f64>> {
    let mut starts: Vec<Vec<f64>> = bank.raw_starts.iter().map(|u| bounds.from_unit(u)).collect();
    if let Some(inc) = incumbent {
        starts.push(inc.to_vec());
    }
    starts
}

fn outer_opts(spec: &AcquisitionSpec) -> AscentOptions {
    AscentOptions { max_iters: spec.outer_max_iters, grad_tol: 1e-9, value_tol: 1e-9, initial_step: 0.1, ..Default::default() }
}

/// Maximizes expected improvement over `best`.
pub fn maximize_ei(
    node: &SurrogateNode<f64>,
    best: f64,
    spec: &AcquisitionSpec,
    bank: &BaseSampleBank,
    bounds: &Bounds,
    incumbent: Option<&[f64]>,
    groups: usize,
) -> Result<Decision> {
    let starts = start_list(bank, bounds, incumbent);
    let f = |x: &[f64], g: Option<&mut [f64]>| -> Option<f64> {
        match g {
            Some(g) => {
                let (v, d) = ei_with_grad(node, x, best);
                g.copy_from_slice(&d);
                Some(v)
            }
            None => Some(ei(node, x, best)),
        }
    };
    let (x, value) = multistart(f, &starts, spec.restarts, bounds, &outer_opts(spec)).ok_or(Error::OptFailure)?;
    Ok(Decision { x, z: vec![true; groups], value })
}

/// Maximizes the (decoupled) knowledge gradient over `x` and, for DG-CF,
/// over the configured subsets. Returns the baseline used.
pub fn maximize_kg<O: InnerObjective>(
    obj: &O,
    spec: &AcquisitionSpec,
    bank: &BaseSampleBank,
    bounds: &Bounds,
    incumbent: Option<&[f64]>,
) -> Result<(Decision, Baseline)> {
    let domain = InnerDomain::Continuous {
        bounds: bounds.clone(),
        opts: AscentOptions { max_iters: spec.inner_max_iters, ..Default::default() },
    };
    let base = baseline(obj, bank, &domain, incumbent)?;
    let starts = start_list(bank, bounds, incumbent);
    let mut per_z: Vec<Option<(Vec<f64>, f64)>> = Vec::new();
    let active = obj.active_groups();
    let subsets: Vec<Vec<bool>> =
        spec.subsets(obj.n_groups()).into_iter().filter(|z| z.iter().zip(&active).any(|(v, a)| *v && *a)).collect();
    for z in &subsets {
        let f = |x: &[f64], g: Option<&mut [f64]>| -> Option<f64> {
            let est = dg_estimate(obj, x, z, bank, &base, &domain).ok()?;
            if let Some(g) = g {
                g.copy_from_slice(&envelope_gradient(obj, x, z, bank, &est, bounds));
            }
            Some(est.value)
        };
        per_z.push(multistart(f, &starts, spec.restarts, bounds, &outer_opts(spec)));
    }
    let values: Vec<Option<f64>> = per_z.iter().map(|r| r.as_ref().map(|(_, v)| *v)).collect();
    let best = argmax_with_ties(&values).ok_or(Error::OptFailure)?;
    let (x, value) = per_z[best].take().unwrap();
    Ok((Decision { x, z: subsets[best].clone(), value }, base))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ei_limits() {
        assert_eq!(ei_from_moments(0.3, 0.0, 0.5, 1e-9).0, 0.0);
        assert_relative_eq!(ei_from_moments(0.8, 0.0, 0.5, 1e-9).0, 0.3, epsilon = 1e-15);
        // Standard normal density at zero, 1/sqrt(2 pi).
        assert_relative_eq!(ei_from_moments(0.5, 1.0, 0.5, 1e-9).0, 0.398_942_280_401_432_7, epsilon = 1e-15);
    }

    #[test]
    fn tie_rule_prefers_lowest_index() {
        assert_eq!(argmax_with_ties(&[Some(1.0), Some(2.0), Some(2.0)]), Some(1));
        assert_eq!(argmax_with_ties(&[None, Some(0.0), Some(1e-18)]), Some(1));
        assert_eq!(argmax_with_ties(&[None, None]), None);
    }
}
