//! Iterative LQR: Gauss-Newton expansions solved by the Riccati recursion,
//! with Levenberg-style input regularization and a backtracking line search.

use serde::{Deserialize, Serialize};

use crate::baselines::lqr::{AffinePolicy, LqProblem};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{evaluate_cost, JacobianSource, Problem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IlqrOptions {
    pub max_iters: usize,
    /// Relative cost decrease below which the iteration stops.
    pub tol: f64,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_max: f64,
    /// Step scales tried are `1, 1/2, ..., 2^-line_search_steps`.
    pub line_search_steps: u32,
    pub jacobian: JacobianSource,
    /// Symmetric input bounds `|u_i| <= limit_i` handled inside the backward
    /// pass; `None` leaves the inputs unconstrained.
    pub input_limit: Option<Vector>,
}

impl Default for IlqrOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            lambda_init: 1e-6,
            lambda_up: 10.0,
            lambda_down: 2.0,
            lambda_max: 1e10,
            line_search_steps: 10,
            jacobian: JacobianSource::Analytic,
            input_limit: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IlqrResult {
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    /// Feedback policy about the final nominal, `u = K x + k`.
    pub policy: AffinePolicy,
    /// Cost of the nominal after every accepted iteration (first entry is the
    /// initial guess).
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the regularization hit its cap without an accepted step. The
    /// best trajectory found so far is still returned.
    pub failure: Option<Error>,
}

pub fn ilqr_solve(
    problem: &Problem,
    x0: &Vector,
    init_inputs: &[Vector],
    opts: &IlqrOptions,
) -> Result<IlqrResult> {
    let horizon = problem.horizon();
    if init_inputs.len() != horizon {
        return Err(Error::LengthMismatch(format!(
            "{} inputs for horizon {}",
            init_inputs.len(),
            horizon
        )));
    }
    let bounds = opts.input_limit.as_ref();
    let mut us: Vec<Vector> = init_inputs.iter().map(|u| clamp(u, bounds)).collect();
    let mut xs = problem.rollout(x0, &us);
    let mut cost = evaluate_cost(&problem.cost, &xs, &us)?;
    if !cost.is_finite() {
        return Err(Error::NonFiniteState { stage: 0 });
    }
    let mut trace = vec![cost];
    let mut lambda = opts.lambda_init;
    let mut converged = false;
    let mut failure = None;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        iterations += 1;
        let lq = LqProblem::from_problem_with(problem, &xs, &us, opts.jacobian)?;
        let Some(pol) = backward(&lq, &xs, &us, lambda, bounds) else {
            lambda *= opts.lambda_up;
            if lambda > opts.lambda_max {
                failure = Some(Error::LineSearchFailed);
                break;
            }
            continue;
        };

        let mut accepted = None;
        for i in 0..=opts.line_search_steps {
            let step = 0.5f64.powi(i as i32);
            let (nx, nu) = forward(problem, x0, &xs, &us, &pol, step, bounds);
            if !nx.iter().all(|x| x.iter().all(|v| v.is_finite())) {
                continue;
            }
            let c = evaluate_cost(&problem.cost, &nx, &nu)?;
            if c.is_finite() && c < cost {
                accepted = Some((nx, nu, c));
                break;
            }
        }
        match accepted {
            Some((nx, nu, c)) => {
                let decrease = (cost - c) / cost.abs().max(1e-300);
                xs = nx;
                us = nu;
                cost = c;
                trace.push(c);
                lambda = (lambda / opts.lambda_down).max(1e-12);
                if decrease < opts.tol {
                    converged = true;
                    break;
                }
            }
            None => {
                // no descent even at the smallest step: regularize harder
                lambda *= opts.lambda_up;
                if lambda > opts.lambda_max {
                    failure = Some(Error::LineSearchFailed);
                    break;
                }
            }
        }
    }

    let lq = LqProblem::from_problem_with(problem, &xs, &us, opts.jacobian)?;
    let local = backward(&lq, &xs, &us, lambda.min(opts.lambda_max), bounds)
        .ok_or(Error::SingularInput(0))?;
    let offsets = (0..horizon)
        .map(|t| &us[t] - &local.gains[t] * &xs[t])
        .collect();
    let policy = AffinePolicy {
        gains: local.gains,
        offsets,
    };
    Ok(IlqrResult {
        states: xs,
        inputs: us,
        policy,
        cost_trace: trace,
        iterations,
        converged,
        failure,
    })
}

fn clamp(u: &Vector, bounds: Option<&Vector>) -> Vector {
    match bounds {
        Some(l) => u.zip_map(l, |v, l| v.clamp(-l, l)),
        None => u.clone(),
    }
}

/// Gauss-Newton backward pass in deviation coordinates. The returned policy
/// holds the feedback gains and the open-loop input steps `du`. With input
/// bounds, each stage solves the box-constrained quadratic by an active set
/// and the clamped directions receive no feedback.
fn backward(
    lq: &LqProblem,
    xs: &[Vector],
    us: &[Vector],
    lambda: f64,
    bounds: Option<&Vector>,
) -> Option<AffinePolicy> {
    let horizon = lq.horizon;
    let (dx, du) = (lq.dx(), lq.du());
    let xt = &xs[horizon];
    let mut p = lq.terminal_q.clone();
    let mut pv = &lq.terminal_q * xt + &lq.terminal_qv;
    let mut gains = vec![Mat::zeros(du, dx); horizon];
    let mut steps = vec![Vector::zeros(du); horizon];
    for t in (0..horizon).rev() {
        let c = lq.cost_at(t);
        let d = lq.dynamics_at(t);
        let (x, u) = (&xs[t], &us[t]);
        let gx = &c.q * x + &c.n * u + &c.qv;
        let gu = &c.r * u + c.n.transpose() * x + &c.rv;
        let at_p = d.a.transpose() * &p;
        let bt_p = d.b.transpose() * &p;
        let qxx = &c.q + &at_p * &d.a;
        let quu = linalg::symmetrize(&(&c.r + &bt_p * &d.b)) + Mat::identity(du, du) * lambda;
        let qux = c.n.transpose() + &bt_p * &d.a;
        let qx = gx + d.a.transpose() * &pv;
        let qu = gu + d.b.transpose() * &pv;

        let mut free: Vec<bool> = vec![true; du];
        let mut k = Vector::zeros(du);
        let mut kk = Mat::zeros(du, dx);
        for _ in 0..=du {
            let idx: Vec<usize> = (0..du).filter(|&i| free[i]).collect();
            let fixed: Vec<usize> = (0..du).filter(|&i| !free[i]).collect();
            if !idx.is_empty() {
                let qff = quu.select_rows(&idx).select_columns(&idx);
                let chol = qff.cholesky()?;
                let mut rhs = qu.select_rows(&idx);
                if !fixed.is_empty() {
                    rhs += quu.select_rows(&idx).select_columns(&fixed) * k.select_rows(&fixed);
                }
                let kf = -chol.solve(&rhs);
                let gf = -chol.solve(&qux.select_rows(&idx));
                for (j, &i) in idx.iter().enumerate() {
                    k[i] = kf[j];
                    kk.row_mut(i).copy_from(&gf.row(j));
                }
            }
            let Some(l) = bounds else { break };
            let mut changed = false;
            for i in 0..du {
                if free[i] && (u[i] + k[i]).abs() > l[i] {
                    k[i] = (u[i] + k[i]).clamp(-l[i], l[i]) - u[i];
                    kk.row_mut(i).fill(0.0);
                    free[i] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        let kt_quu = kk.transpose() * &quu;
        p = linalg::symmetrize(
            &(&qxx + &kt_quu * &kk + kk.transpose() * &qux + qux.transpose() * &kk),
        );
        pv = &qx + &kt_quu * &k + kk.transpose() * &qu + qux.transpose() * &k;
        gains[t] = kk;
        steps[t] = k;
    }
    Some(AffinePolicy {
        gains,
        offsets: steps,
    })
}

fn forward(
    problem: &Problem,
    x0: &Vector,
    xs: &[Vector],
    us: &[Vector],
    pol: &AffinePolicy,
    step: f64,
    bounds: Option<&Vector>,
) -> (Vec<Vector>, Vec<Vector>) {
    let horizon = us.len();
    let mut nx = Vec::with_capacity(horizon + 1);
    let mut nu = Vec::with_capacity(horizon);
    nx.push(x0.clone());
    for t in 0..horizon {
        let u = &us[t] + &pol.offsets[t] * step + &pol.gains[t] * (&nx[t] - &xs[t]);
        let u = clamp(&u, bounds);
        nx.push(problem.dynamics.step_mean(&nx[t], &u, t));
        nu.push(u);
    }
    (nx, nu)
}

/// Gradient of the total cost with respect to each open-loop input, from the
/// first-order terms of the backward pass (adjoint recursion on the
/// Gauss-Newton expansion, whose gradients are exact).
pub fn cost_gradient(
    problem: &Problem,
    x0: &Vector,
    inputs: &[Vector],
    source: JacobianSource,
) -> Result<Vec<Vector>> {
    let xs = problem.rollout(x0, inputs);
    let lq = LqProblem::from_problem_with(problem, &xs, inputs, source)?;
    let horizon = lq.horizon;
    let xt = &xs[horizon];
    let mut adj = (&lq.terminal_q * xt + &lq.terminal_qv) * 2.0;
    let mut grads = vec![Vector::zeros(0); horizon];
    for t in (0..horizon).rev() {
        let c = lq.cost_at(t);
        let d = lq.dynamics_at(t);
        let (x, u) = (&xs[t], &inputs[t]);
        let lx = (&c.q * x + &c.n * u + &c.qv) * 2.0;
        let lu = (&c.r * u + c.n.transpose() * x + &c.rv) * 2.0;
        grads[t] = lu + d.b.transpose() * &adj;
        adj = lx + d.a.transpose() * &adj;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::lqr::lqr_solve;
    use crate::envs::make_env;
    use crate::model::{CostModel, DynamicsModel, LinearDynamics};
    use crate::Gaussian;
    use nalgebra::{dmatrix, dvector};

    fn linear_problem() -> Problem {
        let lin = LinearDynamics {
            a: dmatrix![1.0, 0.1; 0.0, 1.0],
            b: dmatrix![0.0; 0.1],
            c: dvector![0.0, 0.0],
        };
        let dynamics = DynamicsModel::linear(lin, 30, Mat::zeros(2, 2)).unwrap();
        let q = Mat::identity(2, 2);
        let cost = CostModel::quadratic(
            &q,
            &dmatrix![0.1],
            Some(&(q.clone() * 10.0)),
            &dvector![0.0, 0.0],
        )
        .unwrap();
        Problem::new(dynamics, cost, Gaussian::isotropic(dvector![1.0, 0.0], 0.0)).unwrap()
    }

    #[test]
    fn linear_problem_matches_lqr() {
        let p = linear_problem();
        let x0 = dvector![1.0, 0.0];
        let res = ilqr_solve(&p, &x0, &vec![dvector![0.0]; 30], &IlqrOptions::default()).unwrap();
        let lq = LqProblem::from_problem(&p, &res.states, &res.inputs).unwrap();
        let (_, pol) = lqr_solve(&lq).unwrap();
        let (xs, _) = lq.rollout(&x0, &pol);
        for (a, b) in xs.iter().zip(&res.states) {
            assert!((a - b).norm() < 1e-8);
        }
        assert!(res.cost_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn gradient_matches_finite_differences_on_pendulum() {
        let env = make_env("pendulum").unwrap();
        let p = env.problem(false).unwrap();
        let x0 = env.x0.mean.clone();
        let us: Vec<Vector> = (0..p.horizon())
            .map(|t| dvector![0.8 * (t as f64 * 0.05).sin()])
            .collect();
        let g = cost_gradient(&p, &x0, &us, JacobianSource::Analytic).unwrap();
        let total = |us: &[Vector]| evaluate_cost(&p.cost, &p.rollout(&x0, us), us).unwrap();
        for t in (0..p.horizon()).step_by(17) {
            let h = 1e-5;
            let mut up = us.clone();
            let mut dn = us.clone();
            up[t][0] += h;
            dn[t][0] -= h;
            let fd = (total(&up) - total(&dn)) / (2.0 * h);
            assert!(
                (fd - g[t][0]).abs() <= 1e-4 * (1.0 + fd.abs()),
                "t={t} fd={fd} an={}",
                g[t][0]
            );
        }
    }

    #[test]
    fn pendulum_swing_up() {
        let env = make_env("pendulum").unwrap();
        let p = env.problem(false).unwrap();
        let x0 = env.x0.mean.clone();
        let opts = IlqrOptions {
            input_limit: Some(env.u_limit.clone()),
            ..Default::default()
        };
        let res = ilqr_solve(&p, &x0, &vec![dvector![0.0]; p.horizon()], &opts).unwrap();
        let theta = res.states.last().unwrap()[0];
        let wrapped = (theta + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
            - std::f64::consts::PI;
        assert!(
            wrapped.abs() < 0.1,
            "theta_T = {theta}, cost {:?} iters {} conv {} fail {:?} umax {}",
            &res.cost_trace[res.cost_trace.len().saturating_sub(5)..],
            res.iterations,
            res.converged,
            res.failure,
            res.inputs.iter().map(|u| u[0].abs()).fold(0.0, f64::max)
        );
    }

    #[test]
    fn pendulum_beats_energy_pumping() {
        // hand-built reference: pump energy at full torque, catch with PD near
        // upright; the optimizer must find something at least as cheap
        let env = make_env("pendulum").unwrap();
        let p = env.problem(false).unwrap();
        let mut x = env.x0.mean.clone();
        let mut us = Vec::new();
        let mut xs = vec![x.clone()];
        for _ in 0..p.horizon() {
            let th = (x[0] + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
                - std::f64::consts::PI;
            let u = if th.abs() < 0.5 {
                -(20.0 * th + 6.0 * x[1])
            } else if x[1] != 0.0 {
                2.5 * x[1].signum()
            } else {
                2.5
            };
            let u = dvector![u.clamp(-2.5, 2.5)];
            x = env.transition(&x, &u);
            xs.push(x.clone());
            us.push(u);
        }
        let reference = evaluate_cost(&p.cost, &xs, &us).unwrap();
        let opts = IlqrOptions {
            input_limit: Some(env.u_limit.clone()),
            ..Default::default()
        };
        let res = ilqr_solve(&p, &env.x0.mean, &vec![dvector![0.0]; p.horizon()], &opts).unwrap();
        assert!(
            res.cost_trace.last().unwrap() < &reference,
            "{:?} vs {reference}",
            res.cost_trace.last()
        );
        assert!(res.states.last().unwrap()[0].abs() < std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn length_mismatch() {
        let p = linear_problem();
        assert!(matches!(
            ilqr_solve(
                &p,
                &dvector![1.0, 0.0],
                &[dvector![0.0]],
                &IlqrOptions::default()
            ),
            Err(Error::LengthMismatch(_))
        ));
    }
}
