//! Graybox Bayesian-optimization calibration of SIQR epidemic models.
//!
//! The numerical layers (`ode`, `metrics`, `linalg`, `gp`, `neural`) are
//! generic over [`Real`]; the optimization driver runs in `f64`, and the
//! aliases below name the concrete types it uses.

pub mod acquisition;
pub mod calibrate;
pub mod data;
pub mod error;
pub mod experiment;
pub mod funcnet;
pub mod gp;
pub mod linalg;
pub mod metrics;
pub mod neural;
pub mod ode;
pub mod optim;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type CompartmentState = ode::CompartmentState<f64>;
pub type RateSpec = ode::RateSpec<f64>;
pub type Trajectory = ode::Trajectory<f64>;
pub type SurrogateNode = gp::SurrogateNode<f64>;
pub type KernelHyperparams = gp::KernelHyperparams<f64>;
pub type Mlp = neural::Mlp<f64>;
