use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use i2c::bench::output::{write_json, PERCENTILE_METHOD};
use i2c::bench::runner::{cc_target, Solved};
use i2c::bench::{
    configured_env, emit_trajectories, rollout_eval, run_benchmark, solve_variant,
    write_report_csv, write_run_json, write_table_csv, ControllerPolicy, OutputFormat,
    RolloutOptions, RolloutReport, RunConfig, SolverKind, Variant,
};
use i2c::covcontrol::{cc_solve, CcSolution};
use i2c::envs::{EnvSpec, StageCostSpec};
use i2c::gaussian::Gaussian;
use i2c::model::{CostModel, Problem};
use i2c::Error;

/// Stochastic optimal control by Gaussian input inference.
///
/// Settings come from built-in defaults, then the `--config` TOML file, then
/// command-line flags (later sources win).
#[derive(Debug, Parser)]
#[command(name = "i2c", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed for every random stream.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Output format; repeat for several.
    #[arg(long, global = true, value_name = "csv|json")]
    format: Vec<String>,
    /// Environment: linear-unstable, pendulum or cartpole.
    #[arg(long, global = true)]
    env: Option<String>,
    /// Solver: i2c, lqr, leqg, ilqr or cc.
    #[arg(long, global = true)]
    solver: Option<String>,
    /// Number of Monte Carlo rollouts.
    #[arg(long, global = true)]
    rollouts: Option<usize>,
    /// i2c inference mode: stochastic or ce.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// i2c controller: ff, fb or expert.
    #[arg(long, global = true)]
    controller: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve once and write the controller and planned trajectory.
    Solve,
    /// Solve, then evaluate with seeded rollouts.
    Rollout,
    /// Run the configured (environment x variant) grid.
    Bench,
    /// Covariance control towards the configured terminal target.
    Cc,
}

enum Failure {
    Config(Error),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownEnvironment(_) => Failure::Config(e),
            other => Failure::Run(other),
        }
    }
}

fn load_config(g: &Global) -> Result<RunConfig, Error> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if !g.format.is_empty() {
        cfg.formats = g
            .format
            .iter()
            .map(|f| f.parse())
            .collect::<Result<_, _>>()?;
    }
    if let Some(e) = &g.env {
        cfg.env = e.clone();
        cfg.envs.clear();
    }
    if let Some(s) = &g.solver {
        cfg.solver = s.parse()?;
        cfg.variants.clear();
    }
    if let Some(n) = g.rollouts {
        cfg.rollouts = n;
    }
    if let Some(m) = &g.mode {
        cfg.i2c.mode = m.parse()?;
    }
    if let Some(c) = &g.controller {
        cfg.i2c.controller_mode = c.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn wants(cfg: &RunConfig, f: OutputFormat) -> bool {
    cfg.formats.contains(&f)
}

fn single_variant(cfg: &RunConfig) -> Variant {
    Variant {
        solver: cfg.solver,
        mode: None,
        controller: None,
    }
}

fn solve_cmd(cfg: &RunConfig) -> Result<ExitCode, Failure> {
    let env = configured_env(&cfg.env, cfg)?;
    let variant = single_variant(cfg);
    let solved = solve_variant(&env, &variant, cfg)?;
    write_plan(cfg, &env, &solved, None)?;
    println!(
        "{} on {}: {} iterations, converged = {}",
        variant.label(&cfg.i2c),
        cfg.env,
        solved.iterations,
        solved.converged
    );
    Ok(ExitCode::SUCCESS)
}

fn write_plan(
    cfg: &RunConfig,
    env: &EnvSpec,
    solved: &Solved,
    report: Option<&RolloutReport>,
) -> Result<(), Error> {
    std::fs::create_dir_all(&cfg.out)?;
    let plan = solved.plan.clone().unwrap_or_default();
    emit_trajectories(report, &plan, env.dx, env.du, &cfg.out)?;
    if let Some(text) = &solved.controller_text {
        std::fs::write(cfg.out.join("controller.txt"), text)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RolloutSummary<'a> {
    env: &'a str,
    variant: String,
    iterations: usize,
    converged: bool,
    percentile_method: &'a str,
    report: &'a RolloutReport,
}

fn rollout_cmd(cfg: &RunConfig) -> Result<ExitCode, Failure> {
    let env = configured_env(&cfg.env, cfg)?;
    let variant = single_variant(cfg);
    let solved = solve_variant(&env, &variant, cfg)?;
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
    )?;
    write_plan(cfg, &env, &solved, Some(&report))?;
    if wants(cfg, OutputFormat::Csv) {
        write_report_csv(&report, env.dx, &cfg.out.join("rollouts_summary.csv"))?;
    }
    if wants(cfg, OutputFormat::Json) {
        let summary = RolloutSummary {
            env: &cfg.env,
            variant: variant.label(&cfg.i2c),
            iterations: solved.iterations,
            converged: solved.converged,
            percentile_method: PERCENTILE_METHOD,
            report: &report,
        };
        write_run_json(cfg, &summary, &cfg.out.join("rollout.json"))?;
    }
    let s = cfg.cost_scale;
    println!(
        "{} on {}: p10 {:.6} p90 {:.6} mean {:.6} std {:.6} ({} of {} rollouts failed)",
        variant.label(&cfg.i2c),
        cfg.env,
        report.p10 * s,
        report.p90 * s,
        report.mean * s,
        report.std * s,
        report.failures.len(),
        cfg.rollouts
    );
    Ok(if report.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn bench_cmd(cfg: &RunConfig) -> Result<ExitCode, Failure> {
    let (table, timings) = run_benchmark(cfg)?;
    std::fs::create_dir_all(&cfg.out).map_err(Error::from)?;
    if wants(cfg, OutputFormat::Csv) {
        write_table_csv(&table, &cfg.out.join("table.csv"))?;
    }
    if wants(cfg, OutputFormat::Json) {
        write_run_json(cfg, &table, &cfg.out.join("table.json"))?;
    }
    write_json(&timings, &cfg.out.join("timing.json"))?;
    println!(
        "{:<18} {:<12} {:>14} {:>14} {:>14}  status",
        "env", "variant", "p10", "p90", "mean"
    );
    for c in &table.cells {
        let status = match &c.error {
            Some(e) => format!("error: {e}"),
            None if c.failed_rollouts > 0 => format!("{} rollouts failed", c.failed_rollouts),
            None => "ok".into(),
        };
        println!(
            "{:<18} {:<12} {:>14.6} {:>14.6} {:>14.6}  {status}",
            c.env, c.variant, c.p10, c.p90, c.mean
        );
    }
    let partial = table.failed_cells() > 0 || table.cells.iter().any(|c| c.failed_rollouts > 0);
    Ok(if partial {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

#[derive(Serialize)]
struct CcSummary<'a> {
    env: &'a str,
    iterations: usize,
    converged: bool,
    exact_closed_loop: bool,
    kl_direction: &'a str,
    kl_trace: &'a [f64],
    beta_trace: &'a [f64],
    target: &'a Gaussian,
    achieved: &'a Gaussian,
    monte_carlo: Gaussian,
    rollouts: usize,
    failed_rollouts: usize,
}

fn sample_moments(states: &[i2c::linalg::Vector]) -> Result<Gaussian, Error> {
    let n = states.len();
    if n < 2 {
        return Err(Error::Config(
            "need at least two successful rollouts for moments".into(),
        ));
    }
    let dx = states[0].len();
    let mean = states
        .iter()
        .fold(i2c::linalg::Vector::zeros(dx), |a, x| a + x)
        / n as f64;
    let cov = states.iter().fold(i2c::linalg::Mat::zeros(dx, dx), |a, x| {
        let d = x - &mean;
        a + &d * d.transpose()
    }) / (n - 1) as f64;
    Gaussian::new(mean, cov)
}

fn cc_cmd(cfg: &RunConfig) -> Result<ExitCode, Failure> {
    let env = configured_env(&cfg.env, cfg)?;
    let target = cc_target(cfg, env.dx)?;
    let r = match &env.cost {
        StageCostSpec::Quadratic { r, .. } | StageCostSpec::MinEnergy { r } => r.clone(),
    };
    let cost = CostModel::min_energy(&r)?;
    let problem = Problem::new(env.dynamics(true)?, cost.clone(), env.x0.clone())?;
    let sol: CcSolution = cc_solve(&problem, &cfg.i2c, &target, &cfg.cc.schedule, cfg.cc.tol_kl)?;
    let policy = ControllerPolicy {
        controller: sol.controller.clone(),
        sample_actions: true,
    };
    let opts = RolloutOptions {
        execution: cfg.execution,
        keep_trajectories: cfg.keep_trajectories,
    };
    let report = rollout_eval(&env, &policy, &cost, cfg.rollouts, cfg.seed, opts)?;
    let terminals: Vec<_> = report.records.iter().map(|r| r.terminal.clone()).collect();
    let mc = sample_moments(&terminals)?;

    std::fs::create_dir_all(&cfg.out).map_err(Error::from)?;
    let plan: Vec<Gaussian> = (0..=sol.posterior.horizon())
        .map(|t| sol.posterior.state(t))
        .collect::<Result<_, _>>()?;
    emit_trajectories(Some(&report), &plan, env.dx, env.du, &cfg.out)?;
    std::fs::write(cfg.out.join("controller.txt"), sol.controller.to_text())
        .map_err(Error::from)?;
    let summary = CcSummary {
        env: &cfg.env,
        iterations: sol.iterations,
        converged: sol.converged,
        exact_closed_loop: sol.exact,
        kl_direction: "KL(achieved || target)",
        kl_trace: &sol.kl_trace,
        beta_trace: &sol.beta_trace,
        target: &target.target,
        achieved: &sol.achieved,
        monte_carlo: mc,
        rollouts: cfg.rollouts,
        failed_rollouts: report.failures.len(),
    };
    if wants(cfg, OutputFormat::Json) {
        write_run_json(cfg, &summary, &cfg.out.join("cc.json"))?;
    }
    if wants(cfg, OutputFormat::Csv) {
        write_report_csv(&report, env.dx, &cfg.out.join("rollouts_summary.csv"))?;
    }
    println!(
        "cc on {}: {} iterations, converged = {}, final KL(achieved || target) = {:.3e}",
        cfg.env,
        sol.iterations,
        sol.converged,
        sol.kl_trace.last().copied().unwrap_or(f64::NAN)
    );
    println!(
        "monte carlo terminal mean {:?} cov {:?}",
        summary.monte_carlo.mean.as_slice(),
        summary.monte_carlo.cov.as_slice()
    );
    Ok(if sol.converged && report.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match load_config(&cli.global) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(1);
        }
    };
    if matches!(cli.command, Command::Cc) {
        cfg.solver = SolverKind::Cc;
    }
    let outcome = match cli.command {
        Command::Solve => solve_cmd(&cfg),
        Command::Rollout => rollout_cmd(&cfg),
        Command::Bench => bench_cmd(&cfg),
        Command::Cc => cc_cmd(&cfg),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
