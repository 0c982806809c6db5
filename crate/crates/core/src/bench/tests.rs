use nalgebra::{dmatrix, dvector};
use proptest::prelude::*;

use super::output::{content_hash, fmt_f64};
use super::*;
use crate::envs::make_env;
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::i2c::{ControllerMode, InferenceMode};
use crate::linalg::{Mat, Vector};

/// `u = -k x` on every stage.
struct Proportional {
    gain: f64,
    horizon: usize,
}

impl Policy for Proportional {
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn act(&self, _t: usize, x: &Vector, _seed: u64) -> Result<Vector> {
        Ok(dvector![-self.gain * x[0]])
    }
}

/// Commands a non-finite input once the angle exceeds `pi`.
struct Blowup {
    horizon: usize,
}

impl Policy for Blowup {
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn act(&self, _t: usize, x: &Vector, _seed: u64) -> Result<Vector> {
        Ok(dvector![if x[0] > std::f64::consts::PI {
            f64::NAN
        } else {
            0.0
        }])
    }
}

fn deterministic_pendulum() -> crate::envs::EnvSpec {
    let mut env = make_env("pendulum").unwrap().with_noise_scale(0.0);
    env.x0 = Gaussian::new(env.x0.mean.clone(), Mat::zeros(2, 2)).unwrap();
    env.horizon = 40;
    env
}

#[test]
fn nearest_rank_on_one_to_hundred() {
    let v: Vec<f64> = (1..=100).rev().map(f64::from).collect();
    assert_eq!(percentile(&v, 0.1).unwrap(), 10.0);
    assert_eq!(percentile(&v, 0.9).unwrap(), 90.0);
    assert_eq!(percentile(&v, 1.0).unwrap(), 100.0);
    assert_eq!(percentile(&[3.0], 0.1).unwrap(), 3.0);
    assert!(percentile(&[], 0.5).is_err());
    assert!(matches!(
        percentile(&v, 0.0),
        Err(Error::InvalidProbability(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn percentile_matches_counting_oracle(v in prop::collection::vec(-1e3f64..1e3, 1..60), p in 0.01f64..1.0) {
        // smallest sample value with at least p N samples at or below it
        let n = v.len() as f64;
        let oracle = v
            .iter()
            .copied()
            .filter(|c| v.iter().filter(|x| *x <= c).count() as f64 >= p * n - 1e-9)
            .fold(f64::INFINITY, f64::min);
        let got = percentile(&v, p).unwrap();
        // the oracle and ceil() disagree only when p N is within rounding of an integer
        let exact = ((p * n).round() - p * n).abs() > 1e-9;
        if exact {
            prop_assert_eq!(got, oracle);
        }
    }

    #[test]
    fn seventeen_digits_round_trip(x in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
        prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
    }
}

#[test]
fn no_randomness_gives_identical_costs() {
    let env = deterministic_pendulum();
    let cost = env.cost().unwrap();
    let policy = Proportional {
        gain: 0.3,
        horizon: env.horizon,
    };
    let r = rollout_eval(&env, &policy, &cost, 16, 5, RolloutOptions::default()).unwrap();
    assert_eq!(r.records.len(), 16);
    assert!(r.records.iter().all(|c| c.cost == r.records[0].cost));
    assert_eq!(r.std, 0.0);
    assert_eq!(r.p10, r.p90);
}

#[test]
fn same_seed_same_report_across_execution_modes() {
    let env = make_env("pendulum").unwrap();
    let cost = env.cost().unwrap();
    let policy = Proportional {
        gain: 0.5,
        horizon: env.horizon,
    };
    let par = RolloutOptions {
        execution: ExecutionMode::Parallel,
        keep_trajectories: true,
    };
    let seq = RolloutOptions {
        execution: ExecutionMode::Sequential,
        keep_trajectories: true,
    };
    let a = rollout_eval(&env, &policy, &cost, 32, 9, par).unwrap();
    let b = rollout_eval(&env, &policy, &cost, 32, 9, par).unwrap();
    let c = rollout_eval(&env, &policy, &cost, 32, 9, seq).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_eq!(a, c);
    let d = rollout_eval(&env, &policy, &cost, 32, 10, par).unwrap();
    assert_ne!(a.costs(), d.costs());
    assert!(a.p10 <= a.p90);
}

#[test]
fn cost_is_charged_on_commanded_inputs() {
    let env = deterministic_pendulum();
    let cost = env.cost().unwrap();
    let policy = Proportional {
        gain: 10.0,
        horizon: env.horizon,
    };
    let r = rollout_eval(
        &env,
        &policy,
        &cost,
        1,
        0,
        RolloutOptions {
            keep_trajectories: true,
            ..Default::default()
        },
    )
    .unwrap();
    let traj = &r.trajectories.as_ref().unwrap()[0];
    // |u| = 10 pi far exceeds the 2.5 limit at the start
    assert!(traj.inputs[0][0].abs() > 30.0);
    let mut x = env.x0.mean.clone();
    let mut total = 0.0;
    for u in &traj.inputs {
        total += cost.stage_cost(&x, u, 0);
        x = env.step(&x, u, None).unwrap();
    }
    total += cost.terminal_cost(&x);
    assert!((r.records[0].cost - total).abs() <= 1e-9 * total);
    assert_eq!(&x, traj.states.last().unwrap());
}

#[test]
fn non_finite_rollouts_are_recorded_not_fatal() {
    let mut env = make_env("pendulum").unwrap();
    env.horizon = 5;
    let cost = env.cost().unwrap();
    let r = rollout_eval(
        &env,
        &Blowup { horizon: 5 },
        &cost,
        64,
        3,
        RolloutOptions::default(),
    )
    .unwrap();
    assert!(!r.failures.is_empty());
    assert!(!r.records.is_empty());
    assert_eq!(r.failures.len() + r.records.len(), 64);
    assert!(r.records.iter().all(|c| c.cost.is_finite()));
    assert!(r.failures.iter().all(|f| (1..=5).contains(&f.stage)));
}

#[test]
fn horizon_mismatch_is_rejected() {
    let env = make_env("pendulum").unwrap();
    let err = rollout_eval(
        &env,
        &Proportional {
            gain: 0.0,
            horizon: 3,
        },
        &env.cost().unwrap(),
        4,
        0,
        RolloutOptions::default(),
    );
    assert!(matches!(err, Err(Error::LengthMismatch(_))));
}

#[test]
fn plan_csv_shape_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let plan = vec![
        Gaussian::scalar(0.1, 1.0 / 3.0),
        Gaussian::scalar(-2.5e-7, 0.7),
        Gaussian::scalar(1e10, 1e-300),
    ];
    let files = emit_trajectories(None, &plan, 1, 1, dir.path()).unwrap();

    let mut rd = csv::Reader::from_path(&files.plan).unwrap();
    assert_eq!(
        rd.headers().unwrap().iter().collect::<Vec<_>>(),
        vec!["t", "mu_0", "var_0"]
    );
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    for (t, (row, g)) in rows.iter().zip(&plan).enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), t);
        assert_eq!(row[1].parse::<f64>().unwrap(), g.mean[0]);
        assert_eq!(row[2].parse::<f64>().unwrap(), g.cov[(0, 0)]);
    }

    let text = std::fs::read_to_string(&files.rollouts).unwrap();
    assert_eq!(text, "rollout,t,x_0,u_0\n");
}

#[test]
fn rollout_csv_lists_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let env = deterministic_pendulum();
    let policy = Proportional {
        gain: 0.2,
        horizon: env.horizon,
    };
    let opts = RolloutOptions {
        keep_trajectories: true,
        ..Default::default()
    };
    let r = rollout_eval(&env, &policy, &env.cost().unwrap(), 3, 1, opts).unwrap();
    let plan = vec![Gaussian::new(dvector![1.0, 2.0], dmatrix![1.0, 0.5; 0.5, 2.0]).unwrap()];
    let files = emit_trajectories(Some(&r), &plan, 2, 1, dir.path()).unwrap();

    let mut rd = csv::Reader::from_path(&files.plan).unwrap();
    assert_eq!(
        rd.headers().unwrap().iter().collect::<Vec<_>>(),
        vec!["t", "mu_0", "mu_1", "var_0", "cov_0_1", "var_1"]
    );
    let mut rd = csv::Reader::from_path(&files.rollouts).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3 * (env.horizon + 1));
    let last = &rows[env.horizon];
    assert_eq!(&last[4], "");
    let traj = &r.trajectories.as_ref().unwrap()[0];
    assert_eq!(last[2].parse::<f64>().unwrap(), traj.states[env.horizon][0]);
}

#[test]
fn report_csv_includes_failures() {
    let dir = tempfile::tempdir().unwrap();
    let mut env = make_env("pendulum").unwrap();
    env.horizon = 5;
    let r = rollout_eval(
        &env,
        &Blowup { horizon: 5 },
        &env.cost().unwrap(),
        20,
        3,
        RolloutOptions::default(),
    )
    .unwrap();
    let path = dir.path().join("nested/report.csv");
    write_report_csv(&r, 2, &path).unwrap();
    let mut rd = csv::Reader::from_path(&path).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 20);
    assert_eq!(
        rows.iter().filter(|r| !r[4].is_empty()).count(),
        r.failures.len()
    );
}

#[test]
fn git_blob_hash() {
    // `printf 'hello\n' | git hash-object --stdin`
    assert_eq!(
        content_hash("hello\n"),
        "ce013625030ba8dba906f756967f9e9ca394464a"
    );
    assert_eq!(content_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

fn small_grid() -> RunConfig {
    RunConfig {
        env: "pendulum".into(),
        overrides: EnvOverrides {
            horizon: Some(40),
            noise_scale: 1.0,
        },
        rollouts: 8,
        seed: 11,
        variants: vec![
            Variant {
                solver: SolverKind::I2c,
                mode: Some(InferenceMode::CertaintyEquivalent),
                controller: Some(ControllerMode::Expert),
            },
            Variant {
                solver: SolverKind::I2c,
                mode: Some(InferenceMode::CertaintyEquivalent),
                controller: Some(ControllerMode::Fb),
            },
            Variant {
                solver: SolverKind::Ilqr,
                mode: None,
                controller: None,
            },
        ],
        ..RunConfig::default()
    }
}

#[test]
fn grid_shape_and_determinism() {
    let cfg = small_grid();
    let (table, timings) = run_benchmark(&cfg).unwrap();
    assert_eq!(table.envs, vec!["pendulum"]);
    assert_eq!(table.variants, vec!["i2c(CE,E)", "i2c(CE,FB)", "ilqr"]);
    assert_eq!(table.cells.len(), 3);
    assert_eq!(timings.len(), 3);
    assert_eq!(table.failed_cells(), 0, "{:?}", table.cells);
    for c in &table.cells {
        assert!(c.p10 <= c.p90);
    }

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_table_csv(&table, &a).unwrap();
    let (again, _) = run_benchmark(&RunConfig {
        execution: ExecutionMode::Sequential,
        ..cfg.clone()
    })
    .unwrap();
    write_table_csv(&again, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let (ja, jb) = (dir.path().join("a.json"), dir.path().join("b.json"));
    write_run_json(&cfg, &table, &ja).unwrap();
    write_run_json(&cfg, &again, &jb).unwrap();
    assert_eq!(std::fs::read(&ja).unwrap(), std::fs::read(&jb).unwrap());
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&ja).unwrap()).unwrap();
    assert_eq!(
        doc["config_hash"].as_str().unwrap(),
        content_hash(&cfg.to_toml().unwrap())
    );
    assert_eq!(doc["results"]["cells"].as_array().unwrap().len(), 3);
}

#[test]
fn failing_cell_does_not_stop_the_grid() {
    let cfg = RunConfig {
        env: "linear-unstable".into(),
        rollouts: 4,
        variants: vec![
            // no target configured
            Variant {
                solver: SolverKind::Cc,
                mode: None,
                controller: None,
            },
            Variant {
                solver: SolverKind::Lqr,
                mode: None,
                controller: None,
            },
        ],
        ..RunConfig::default()
    };
    let (table, _) = run_benchmark(&cfg).unwrap();
    assert_eq!(table.failed_cells(), 1);
    assert!(table.cell("linear-unstable", "cc").unwrap().error.is_some());
    let lqr = table.cell("linear-unstable", "lqr").unwrap();
    assert!(lqr.error.is_none() && lqr.mean.is_finite());
}
