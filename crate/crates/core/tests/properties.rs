use epicalib::acquisition::decoupling_scale;
use epicalib::experiment::{fmt_f64, mean_sd};
use epicalib::gp::{InputScaling, KernelHyperparams, SurrogateNode};
use epicalib::metrics::{objective, ObservationSet};
use epicalib::ode::{simulate, CompartmentState, RateSpec, TimeGrid};
use proptest::prelude::*;

fn simplex() -> impl Strategy<Value = CompartmentState<f64>> {
    prop::array::uniform4(0.01f64..1.0).prop_map(|w| {
        let t: f64 = w.iter().sum();
        CompartmentState::new(w[0] / t, w[1] / t, w[2] / t, 1.0 - (w[0] + w[1] + w[2]) / t)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_dynamics_conserve_mass(x in prop::array::uniform4(0.0f64..1.0), init in simplex()) {
        let traj = simulate(&RateSpec::linear(&x).unwrap(), &init, &TimeGrid::daily(30.0, 1)).unwrap();
        for st in &traj.states {
            prop_assert!((st.total() - 1.0).abs() <= 1e-9);
        }
        let s = traj.compartment(0);
        prop_assert!(s.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn metric_is_nonpositive_and_zero_on_self(x in prop::array::uniform4(0.0f64..1.0), y in prop::array::uniform4(0.0f64..1.0)) {
        let grid = TimeGrid::daily(30.0, 3);
        let init = CompartmentState::new(0.99, 0.01, 0.0, 0.0);
        let a = simulate(&RateSpec::linear(&x).unwrap(), &init, &grid).unwrap();
        let b = simulate(&RateSpec::linear(&y).unwrap(), &init, &grid).unwrap();
        let obs = ObservationSet::from_trajectory(&b).unwrap();
        prop_assert!(objective(&a, &obs).unwrap().value <= 0.0);
        prop_assert_eq!(objective(&b, &obs).unwrap().value, 0.0);
    }

    #[test]
    fn posterior_variance_is_nonnegative_and_bounded(
        pts in prop::collection::vec(0.0f64..1.0, 2..8),
        q in 0.0f64..1.0,
        ls in 0.05f64..2.0,
    ) {
        let xs: Vec<Vec<f64>> = pts.iter().map(|p| vec![*p]).collect();
        let ys = vec![pts.iter().map(|p| (3.0 * p).cos()).collect::<Vec<f64>>()];
        let hyper = KernelHyperparams { lengthscales: vec![ls], signal_variance: 1.3, noise_jitter: 1e-6, mean_const: 0.0 };
        let node = SurrogateNode::condition(&xs, &ys, InputScaling::identity(1), hyper).unwrap();
        let (m, v) = node.posterior(&[q]);
        let scale = node.target_scaling(0).scale;
        prop_assert!(m.is_finite());
        prop_assert!(v >= 0.0);
        prop_assert!(v <= 1.3 * scale * scale * (1.0 + 1e-9));
    }

    #[test]
    fn decoupling_scale_is_at_least_one(z in prop::array::uniform4(any::<bool>()), active in prop::array::uniform4(any::<bool>())) {
        match decoupling_scale(&z, &active) {
            Ok(s) => {
                let hit = z.iter().zip(&active).filter(|(a, b)| **a && **b).count();
                prop_assert!(hit > 0);
                prop_assert!(s >= 1.0);
                prop_assert_eq!(s, active.iter().filter(|a| **a).count() as f64 / hit as f64);
            }
            Err(_) => prop_assert!(z.iter().zip(&active).all(|(a, b)| !(*a && *b))),
        }
    }

    #[test]
    fn float_format_is_lossless(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
    }

    #[test]
    fn sample_sd_is_shift_invariant(v in prop::collection::vec(-10.0f64..10.0, 2..20), shift in -5.0f64..5.0) {
        let (m, s) = mean_sd(&v);
        let moved: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let (m2, s2) = mean_sd(&moved);
        prop_assert!(s >= 0.0);
        prop_assert!((m2 - m - shift).abs() < 1e-9);
        prop_assert!((s2 - s).abs() < 1e-9);
    }
}
