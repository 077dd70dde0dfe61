//! Synthetic end-to-end harness: shifted toy tasks, a small deterministic
//! trainer, and experiment drivers that score selections against the
//! target-domain oracle.

pub mod mixture;
pub mod mlp;
pub mod presets;
pub mod rng;
pub mod scenario;
pub mod task;
pub mod train;

pub use mixture::{mixture_grid, MixtureConfig};
pub use mlp::{Activation, Init, Mlp};
pub use scenario::{
    efficiency_sweep, evaluate_trial, report_from, run_scenario, sweep_from, train_trial, train_trials, write_trial_run,
    ExperimentReport, GridCut, Method, MethodSummary, ScenarioConfig, Stats, Summary, SweepReport, SweepRow,
    TrainedTrial, TrialRecord,
};
pub use task::{generate_shift_task, Component, Dataset, MixtureSpec, ShiftSpec, ShiftTask, SplitSizes};
pub use train::{
    capture_activations, layer_names, run_trajectory, train_final, train_with_checkpoints, CapturedBatch, OracleCurve,
    RunSpec, Tap, TrainRun,
};
