//! Acquisition functions and their maximization.

pub mod bank;
pub mod kg;
pub mod maximize;
pub mod spec;

pub use bank::{iteration_seed, BaseSampleBank};
pub use kg::{
    baseline, decoupling_scale, dg_estimate, envelope_gradient, inner_maximize, kg_estimate, Baseline, BlackboxObjective, InnerDomain,
    InnerObjective, KgEstimate, NetworkObjective,
};
pub use maximize::{argmax_with_ties, ei, ei_from_moments, ei_with_grad, maximize_ei, maximize_kg, multistart, Decision};
pub use spec::{all_z_subsets, default_z_subsets, AcquisitionKind, AcquisitionSpec};
