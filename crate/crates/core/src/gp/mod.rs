//! Exact Gaussian-process regression: Matérn-5/2 ARD kernel, constant mean,
//! fixed jitter, type-II maximum likelihood and rank-one fantasy updates.

pub mod fit;
pub mod kernel;
pub mod node;

pub use fit::{fit_mle, fit_node, fit_pooled, pooled_log_likelihood, FitGroup, FitOptions, FitOutcome};
pub use kernel::{kernel, matern52, KernelHyperparams};
pub use node::{InputScaling, NodeEval, PointFantasy, PosteriorGrad, SurrogateNode, TargetScaling};
