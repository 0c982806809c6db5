//! Monte Carlo checks of covariance control against sampled rollouts.

use i2c::bench::runner::cc_target;
use i2c::bench::{
    configured_env, rollout_eval, ControllerPolicy, RolloutOptions, RolloutReport, RunConfig,
};
use i2c::covcontrol::{cc_solve, closed_loop_moments, CcSolution};
use i2c::envs::EnvSpec;
use i2c::linalg::{Mat, Vector};
use i2c::model::{CostModel, Problem};
use nalgebra::dmatrix;

fn sample_moments(xs: &[Vector]) -> (Vector, Mat) {
    let n = xs.len() as f64;
    let mean = xs.iter().fold(Vector::zeros(xs[0].len()), |a, x| a + x) / n;
    let cov = xs.iter().fold(Mat::zeros(mean.len(), mean.len()), |a, x| {
        let d = x - &mean;
        a + &d * d.transpose()
    }) / (n - 1.0);
    (mean, cov)
}

fn solve_cc(
    env_name: &str,
    mean: Vec<f64>,
    cov: Vec<f64>,
) -> (RunConfig, EnvSpec, Problem, CcSolution) {
    let mut cfg = RunConfig {
        env: env_name.into(),
        ..RunConfig::default()
    };
    cfg.cc.target_mean = mean;
    cfg.cc.target_cov = cov;
    let env = configured_env(env_name, &cfg).unwrap();
    let target = cc_target(&cfg, env.dx).unwrap();
    let r = Mat::identity(env.du, env.du);
    let problem = Problem::new(
        env.dynamics(true).unwrap(),
        CostModel::min_energy(&r).unwrap(),
        env.x0.clone(),
    )
    .unwrap();
    let sol = cc_solve(&problem, &cfg.i2c, &target, &cfg.cc.schedule, cfg.cc.tol_kl).unwrap();
    (cfg, env, problem, sol)
}

fn sampled_rollouts(env: &EnvSpec, problem: &Problem, sol: &CcSolution, n: usize) -> RolloutReport {
    let policy = ControllerPolicy {
        controller: sol.controller.clone(),
        sample_actions: true,
    };
    let opts = RolloutOptions {
        keep_trajectories: true,
        ..RolloutOptions::default()
    };
    rollout_eval(env, &policy, &problem.cost, n, 11, opts).unwrap()
}

#[test]
fn linear_closed_loop_moments_match_sampling_at_every_stage() {
    let (_, env, problem, sol) =
        solve_cc("linear-unstable", vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]);
    let lin = vec![problem.dynamics.linear.clone().unwrap(); problem.horizon()];
    let noise: Vec<Mat> = (0..problem.horizon())
        .map(|t| problem.dynamics.noise_cov(t).clone())
        .collect();
    let exact = closed_loop_moments(&lin, &noise, &problem.x0, &sol.controller).unwrap();

    let n = 20_000;
    let report = sampled_rollouts(&env, &problem, &sol, n);
    assert!(report.failures.is_empty());
    let trajs = report.trajectories.as_ref().unwrap();
    for t in (0..=problem.horizon()).step_by(10) {
        let xs: Vec<Vector> = trajs.iter().map(|tr| tr.states[t].clone()).collect();
        let (mean, cov) = sample_moments(&xs);
        let g = &exact[t];
        for i in 0..env.dx {
            let se = (g.cov[(i, i)] / n as f64).sqrt().max(1e-12);
            assert!(
                (mean[i] - g.mean[i]).abs() < 4.0 * se,
                "t={t} mean {mean} vs {}",
                g.mean
            );
        }
        if g.cov.norm() > 0.0 {
            let rel = (&cov - &g.cov).norm() / g.cov.norm();
            assert!(rel < 0.05, "t={t} cov rel err {rel}");
        }
    }
    assert!((&exact[problem.horizon()].cov - &sol.achieved.cov).norm() < 1e-9);
}

#[test]
fn linear_terminal_target_reached_in_sampling() {
    let (_, env, problem, sol) =
        solve_cc("linear-unstable", vec![0.0, 0.0], vec![0.5, 0.0, 0.0, 0.5]);
    assert!(sol.converged);
    let report = sampled_rollouts(&env, &problem, &sol, 100_000);
    let xs: Vec<Vector> = report.records.iter().map(|r| r.terminal.clone()).collect();
    let (mean, cov) = sample_moments(&xs);
    let target = dmatrix![0.5, 0.0; 0.0, 0.5];
    for i in 0..2 {
        assert!(
            mean[i].abs() < 3.0 * (0.5 / xs.len() as f64).sqrt(),
            "mean {mean}"
        );
    }
    assert!((&cov - &target).norm() / target.norm() < 0.05, "cov {cov}");
}

#[test]
fn pendulum_swing_up_to_terminal_distribution() {
    let (_, env, problem, sol) = solve_cc("pendulum", vec![0.0, 0.0], vec![0.05, 0.0, 0.0, 0.1]);
    let report = sampled_rollouts(&env, &problem, &sol, 1000);
    let xs: Vec<Vector> = report.records.iter().map(|r| r.terminal.clone()).collect();
    let (mean, cov) = sample_moments(&xs);
    let target = dmatrix![0.05, 0.0; 0.0, 0.1];
    let rel = (&cov - &target).norm() / target.norm();
    assert!(
        rel < 0.2,
        "terminal covariance off by {:.0}% (mean {mean}, cov {cov}, cc converged {}, KL {:?})",
        rel * 100.0,
        sol.converged,
        sol.kl_trace.last()
    );
}
