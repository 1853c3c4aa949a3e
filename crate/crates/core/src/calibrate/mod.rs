//! End-to-end calibration loops.

pub mod bo;
pub mod twostage;

pub use bo::{init_design, log_mse, recommend, run_bo, BoRun, BoSettings, Phase, QueryRecord, Simulator};
pub use twostage::{
    full_trajectory, mean_window_loss, run_two_stage, train_stage2, window_loss, Stage2Data, Stage2Params, Stage2Result,
    Stage2Settings, StageOneSimulator, TwoStageConfig, TwoStageResult,
};
