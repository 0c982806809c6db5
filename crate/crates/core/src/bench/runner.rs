//! Solving a configured variant and running the benchmark grid.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{ilqr_solve, leqg_solve, lqr_solve, IlqrOptions, LqProblem};
use crate::bench::config::{RunConfig, SolverKind, Variant};
use crate::bench::rollout::{
    rollout_eval, ControllerPolicy, Policy, RolloutOptions, RolloutReport,
};
use crate::covcontrol::{cc_solve, TerminalTarget};
use crate::envs::{make_env, EnvSpec};
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::i2c::{solve, I2cConfig};
use crate::linalg::{Mat, Vector};
use crate::model::{CostModel, Problem};
use crate::par::{self, Execution};

/// Built-in environment with the configured overrides applied.
pub fn configured_env(name: &str, cfg: &RunConfig) -> Result<EnvSpec> {
    let mut env = make_env(name)?.with_noise_scale(cfg.overrides.noise_scale);
    if let Some(h) = cfg.overrides.horizon {
        env.horizon = h;
    }
    env.validate()?;
    Ok(env)
}

/// Planned state beliefs, when the solver produces them.
pub type Plan = Vec<Gaussian>;

/// A solved variant: the policy to execute and what it was scored against.
pub struct Solved {
    pub policy: Box<dyn Policy>,
    pub cost: CostModel,
    pub plan: Option<Plan>,
    /// Human-readable controller, for solvers that build one.
    pub controller_text: Option<String>,
    pub iterations: usize,
    pub converged: bool,
}

/// Target of a covariance-control run from the config.
pub fn cc_target(cfg: &RunConfig, dx: usize) -> Result<TerminalTarget> {
    let (m, c) = (&cfg.cc.target_mean, &cfg.cc.target_cov);
    if m.len() != dx || c.len() != dx * dx {
        return Err(Error::Config(format!(
            "cc target needs a {dx}-vector mean and a {dx}x{dx} covariance, got {} and {} values",
            m.len(),
            c.len()
        )));
    }
    TerminalTarget::new(Gaussian::new(
        Vector::from_column_slice(m),
        Mat::from_row_slice(dx, dx, c),
    )?)
}

fn plan_from_posterior(post: &crate::i2c::Posterior) -> Result<Plan> {
    (0..=post.horizon()).map(|t| post.state(t)).collect()
}

/// Runs one solver on one environment.
pub fn solve_variant(env: &EnvSpec, variant: &Variant, cfg: &RunConfig) -> Result<Solved> {
    let problem = env.problem(true)?;
    let i2c_cfg: I2cConfig = variant.i2c_config(&cfg.i2c);
    let horizon = env.horizon;
    match variant.solver {
        SolverKind::I2c => {
            let sol = solve(&problem, &i2c_cfg)?;
            Ok(Solved {
                plan: Some(plan_from_posterior(&sol.posterior)?),
                controller_text: Some(sol.controller.to_text()),
                policy: Box::new(ControllerPolicy {
                    controller: sol.controller,
                    sample_actions: cfg.sample_actions,
                }),
                cost: problem.cost,
                iterations: sol.diagnostics.iterations,
                converged: sol.diagnostics.converged,
            })
        }
        SolverKind::Lqr | SolverKind::Leqg => {
            let xs = vec![env.x0.mean.clone(); horizon + 1];
            let us = vec![Vector::zeros(env.du); horizon];
            let lq = LqProblem::from_problem(&problem, &xs, &us)?;
            let (_, policy) = if variant.solver == SolverKind::Lqr {
                lqr_solve(&lq)?
            } else {
                let noise: Vec<Mat> = (0..horizon)
                    .map(|t| problem.dynamics.noise_cov(t).clone())
                    .collect();
                leqg_solve(&lq, &noise, cfg.sigma)?
            };
            Ok(Solved {
                policy: Box::new(policy),
                cost: problem.cost,
                plan: None,
                controller_text: None,
                iterations: 1,
                converged: true,
            })
        }
        SolverKind::Ilqr => {
            let opts = IlqrOptions {
                max_iters: cfg.ilqr.max_iters,
                tol: cfg.ilqr.tol,
                input_limit: env
                    .u_limit
                    .iter()
                    .all(|l| l.is_finite())
                    .then(|| env.u_limit.clone()),
                ..IlqrOptions::default()
            };
            let res = ilqr_solve(
                &problem,
                &env.x0.mean,
                &vec![Vector::zeros(env.du); horizon],
                &opts,
            )?;
            if let Some(e) = res.failure {
                if res.iterations == 0 {
                    return Err(e);
                }
            }
            Ok(Solved {
                policy: Box::new(res.policy),
                cost: problem.cost,
                controller_text: None,
                plan: Some(
                    res.states
                        .iter()
                        .map(|x| Gaussian::new(x.clone(), Mat::zeros(env.dx, env.dx)))
                        .collect::<Result<_>>()?,
                ),
                iterations: res.iterations,
                converged: res.converged,
            })
        }
        SolverKind::Cc => {
            let r = match &env.cost {
                crate::envs::StageCostSpec::Quadratic { r, .. }
                | crate::envs::StageCostSpec::MinEnergy { r } => r.clone(),
            };
            let cost = CostModel::min_energy(&r)?;
            let problem = Problem::new(problem.dynamics, cost.clone(), env.x0.clone())?;
            let target = cc_target(cfg, env.dx)?;
            let sol = cc_solve(&problem, &i2c_cfg, &target, &cfg.cc.schedule, cfg.cc.tol_kl)?;
            Ok(Solved {
                plan: Some(plan_from_posterior(&sol.posterior)?),
                controller_text: Some(sol.controller.to_text()),
                policy: Box::new(ControllerPolicy {
                    controller: sol.controller,
                    sample_actions: true,
                }),
                cost,
                iterations: sol.iterations,
                converged: sol.converged,
            })
        }
    }
}

/// One cell of the benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub env: String,
    pub variant: String,
    pub p10: f64,
    pub p90: f64,
    pub mean: f64,
    pub std: f64,
    pub rollouts: usize,
    pub failed_rollouts: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the solver or the rollouts failed outright.
    pub error: Option<String>,
}

/// Wall-clock time per cell, kept apart from the reproducible table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub env: String,
    pub variant: String,
    pub solve_seconds: f64,
    pub rollout_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub envs: Vec<String>,
    pub variants: Vec<String>,
    /// Row-major: `cells[i * variants.len() + j]` is env `i`, variant `j`.
    pub cells: Vec<Cell>,
}

impl BenchTable {
    pub fn cell(&self, env: &str, variant: &str) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.env == env && c.variant == variant)
    }

    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

/// Solves and evaluates one cell; errors are recorded in the cell.
pub fn run_cell(
    env_name: &str,
    variant: &Variant,
    cfg: &RunConfig,
) -> (Cell, CellTiming, Option<RolloutReport>) {
    let label = variant.label(&cfg.i2c);
    let mut cell = Cell {
        env: env_name.to_string(),
        variant: label.clone(),
        p10: f64::NAN,
        p90: f64::NAN,
        mean: f64::NAN,
        std: f64::NAN,
        rollouts: cfg.rollouts,
        failed_rollouts: 0,
        iterations: 0,
        converged: false,
        error: None,
    };
    let mut timing = CellTiming {
        env: env_name.to_string(),
        variant: label,
        solve_seconds: 0.0,
        rollout_seconds: 0.0,
    };
    let start = Instant::now();
    let solved = configured_env(env_name, cfg)
        .and_then(|env| solve_variant(&env, variant, cfg).map(|s| (env, s)));
    timing.solve_seconds = start.elapsed().as_secs_f64();
    let (env, solved) = match solved {
        Ok(v) => v,
        Err(e) => {
            cell.error = Some(e.to_string());
            return (cell, timing, None);
        }
    };
    cell.iterations = solved.iterations;
    cell.converged = solved.converged;
    let start = Instant::now();
    let opts = RolloutOptions {
        execution: cfg.execution,
        keep_trajectories: cfg.keep_trajectories,
    };
    let report = rollout_eval(
        &env,
        solved.policy.as_ref(),
        &solved.cost,
        cfg.rollouts,
        cfg.seed,
        opts,
    );
    timing.rollout_seconds = start.elapsed().as_secs_f64();
    match report {
        Ok(r) => {
            cell.failed_rollouts = r.failures.len();
            if r.records.is_empty() {
                cell.error = Some("every rollout failed".into());
            }
            cell.p10 = r.p10 * cfg.cost_scale;
            cell.p90 = r.p90 * cfg.cost_scale;
            cell.mean = r.mean * cfg.cost_scale;
            cell.std = r.std * cfg.cost_scale;
            (cell, timing, Some(r))
        }
        Err(e) => {
            cell.error = Some(e.to_string());
            (cell, timing, None)
        }
    }
}

/// Runs the (environment x variant) grid. Cells run in parallel; a failing
/// cell is recorded and never stops the others.
pub fn run_benchmark(cfg: &RunConfig) -> Result<(BenchTable, Vec<CellTiming>)> {
    cfg.validate()?;
    let envs = cfg.env_names();
    let variants = cfg.variant_list();
    let jobs: Vec<(String, Variant)> = envs
        .iter()
        .flat_map(|e| variants.iter().map(move |v| (e.clone(), v.clone())))
        .collect();
    let exec: Execution = cfg.execution.into();
    let results = par::map_with(exec, &jobs, |(e, v)| {
        let (cell, timing, _) = run_cell(e, v, cfg);
        (cell, timing)
    });
    let (cells, timings) = results.into_iter().unzip();
    Ok((
        BenchTable {
            envs,
            variants: variants.iter().map(|v| v.label(&cfg.i2c)).collect(),
            cells,
        },
        timings,
    ))
}
