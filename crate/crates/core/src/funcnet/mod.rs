//! Function-network surrogate of the simulator's compartment outputs.

pub mod surrogate;
pub mod topology;

pub use surrogate::{
    modeled_compartments, FitSettings, HistoryPoint, InnerDraws, MetricTargets, NetworkFantasy, NetworkSurrogate,
    SurrogateMode,
};
pub use topology::{FunctionNetwork, TopologyDoc};
