//! Seeded Monte Carlo evaluation of a policy on an environment.

use serde::{Deserialize, Serialize};

use crate::baselines::AffinePolicy;
use crate::bench::rng::{self, Purpose};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::i2c::LinearGaussianController;
use crate::linalg::{Mat, Vector};
use crate::model::{evaluate_cost, CostModel};
use crate::par::{self, Execution};

/// Anything that maps `(t, x)` to a commanded input.
pub trait Policy: Sync {
    fn horizon(&self) -> usize;
    /// `seed` keys any randomness the policy uses for this call.
    fn act(&self, t: usize, x: &Vector, seed: u64) -> Result<Vector>;
}

/// An i2c controller executed in its own mode, optionally sampling its
/// action covariance.
#[derive(Debug, Clone)]
pub struct ControllerPolicy {
    pub controller: LinearGaussianController,
    pub sample_actions: bool,
}

impl Policy for ControllerPolicy {
    fn horizon(&self) -> usize {
        self.controller.horizon()
    }

    fn act(&self, t: usize, x: &Vector, seed: u64) -> Result<Vector> {
        self.controller.control(t, x, self.sample_actions, seed)
    }
}

impl Policy for AffinePolicy {
    fn horizon(&self) -> usize {
        AffinePolicy::horizon(self)
    }

    fn act(&self, t: usize, x: &Vector, _seed: u64) -> Result<Vector> {
        Ok(self.action(t, x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub execution: ExecutionMode,
    pub keep_trajectories: bool,
}

/// Serializable mirror of [`Execution`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    #[default]
    Parallel,
    Sequential,
}

impl From<ExecutionMode> for Execution {
    fn from(m: ExecutionMode) -> Self {
        match m {
            ExecutionMode::Parallel => Execution::Parallel,
            ExecutionMode::Sequential => Execution::Sequential,
        }
    }
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            execution: ExecutionMode::Parallel,
            keep_trajectories: false,
        }
    }
}

/// States `x_0..x_T` and commanded inputs `u_0..u_{T-1}` of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub index: usize,
    pub cost: f64,
    pub terminal: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutFailure {
    pub index: usize,
    pub stage: usize,
    pub reason: String,
}

/// Summary of `N` rollouts. Statistics cover the successful rollouts only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub records: Vec<RolloutRecord>,
    pub failures: Vec<RolloutFailure>,
    pub p10: f64,
    pub p90: f64,
    pub mean: f64,
    /// Sample standard deviation (`N - 1` denominator, 0 for one rollout).
    pub std: f64,
    /// Indexed like `records` when requested.
    pub trajectories: Option<Vec<Trajectory>>,
}

impl RolloutReport {
    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cost).collect()
    }

    pub fn spread(&self) -> f64 {
        self.p90 - self.p10
    }
}

/// Nearest-rank percentile: the `ceil(p N)`-th smallest value, `p` in (0, 1].
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Config("percentile of an empty sample".into()));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Stage key used for the initial-state draw.
const INITIAL_STAGE: u64 = u64::MAX;

fn one_rollout(
    env: &EnvSpec,
    policy: &dyn Policy,
    cost: &CostModel,
    seed: u64,
    index: usize,
    x0_factor: &Mat,
    noise_factor: &Mat,
) -> std::result::Result<(f64, Trajectory), RolloutFailure> {
    let fail = |stage: usize, e: Error| RolloutFailure {
        index,
        stage,
        reason: e.to_string(),
    };
    let i = index as u64;
    let mut x = rng::gaussian_draw(
        &mut rng::stream(seed, i, INITIAL_STAGE, Purpose::InitialState),
        &env.x0.mean,
        x0_factor,
    );
    let horizon = policy.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut inputs = Vec::with_capacity(horizon);
    let zero = Vector::zeros(env.dx);
    for t in 0..horizon {
        let u = policy
            .act(t, &x, rng::stream_key(seed, i, t as u64, Purpose::Action))
            .map_err(|e| fail(t, e))?;
        let w = rng::gaussian_draw(
            &mut rng::stream(seed, i, t as u64, Purpose::ProcessNoise),
            &zero,
            noise_factor,
        );
        let next = env
            .step(&x, &u, Some(&w))
            .map_err(|_| fail(t + 1, Error::NonFiniteState { stage: t + 1 }))?;
        states.push(std::mem::replace(&mut x, next));
        inputs.push(u);
    }
    states.push(x);
    let c = evaluate_cost(cost, &states, &inputs).map_err(|e| fail(horizon, e))?;
    if !c.is_finite() {
        return Err(fail(horizon, Error::NonFiniteState { stage: horizon }));
    }
    Ok((c, Trajectory { states, inputs }))
}

/// `n` independent rollouts of `policy` on `env`.
///
/// Inputs are clamped by the environment when executed, while the cost is
/// charged on the commanded (unclamped) inputs. Initial states, process
/// noise and action samples come from streams keyed by `(seed, rollout,
/// stage)`, so the report is identical for parallel and sequential runs.
pub fn rollout_eval(
    env: &EnvSpec,
    policy: &dyn Policy,
    cost: &CostModel,
    n: usize,
    seed: u64,
    opts: RolloutOptions,
) -> Result<RolloutReport> {
    if n == 0 {
        return Err(Error::Config("rollout count must be at least 1".into()));
    }
    if policy.horizon() != env.horizon {
        return Err(Error::LengthMismatch(format!(
            "policy horizon {} vs environment horizon {}",
            policy.horizon(),
            env.horizon
        )));
    }
    let x0_factor = rng::sampling_factor(&env.x0.cov)?;
    let noise_factor = rng::sampling_factor(&env.noise)?;
    let outcomes = par::map_range(opts.execution.into(), n, |i| {
        one_rollout(env, policy, cost, seed, i, &x0_factor, &noise_factor)
    });

    let mut records = Vec::with_capacity(n);
    let mut failures = Vec::new();
    let mut trajectories = Vec::new();
    for (index, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok((cost, traj)) => {
                records.push(RolloutRecord {
                    index,
                    cost,
                    terminal: traj.states.last().expect("x_T").clone(),
                });
                if opts.keep_trajectories {
                    trajectories.push(traj);
                }
            }
            Err(f) => failures.push(f),
        }
    }
    let costs: Vec<f64> = records.iter().map(|r| r.cost).collect();
    let (p10, p90) = if costs.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (percentile(&costs, 0.1)?, percentile(&costs, 0.9)?)
    };
    let (mean, std) = mean_std(&costs);
    Ok(RolloutReport {
        records,
        failures,
        p10,
        p90,
        mean,
        std,
        trajectories: opts.keep_trajectories.then_some(trajectories),
    })
}
