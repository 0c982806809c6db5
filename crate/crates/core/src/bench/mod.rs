//! Benchmark harness: seeded Monte Carlo evaluation of solved controllers,
//! percentile tables over (environment x solver) grids, and CSV/JSON output.

pub mod config;
pub mod output;
pub mod rng;
pub mod rollout;
pub mod runner;

pub use config::{
    CcSettings, EnvOverrides, IlqrSettings, OutputFormat, RunConfig, SolverKind, Variant,
};
pub use output::{
    emit_trajectories, write_report_csv, write_run_json, write_table_csv, TrajectoryFiles,
};
pub use rollout::{
    mean_std, percentile, rollout_eval, ControllerPolicy, ExecutionMode, Policy, RolloutOptions,
    RolloutReport, Trajectory,
};
pub use runner::{
    configured_env, run_benchmark, run_cell, solve_variant, BenchTable, Cell, CellTiming, Solved,
};

#[cfg(test)]
mod tests;
