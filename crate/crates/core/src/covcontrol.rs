//! Covariance control: steer the closed-loop terminal state distribution onto
//! a Gaussian target by clamping the terminal belief of the smoother.
//!
//! The clamp is annealed. Early iterations blend the target with the
//! achieved terminal distribution and later ones impose the target alone.
//! The smoothed terminal marginal and the terminal distribution the extracted
//! controller actually reaches differ whenever process noise is present, so
//! the belief handed to the smoother is corrected after every pass until the
//! closed loop, not the posterior, lands on the clamped density.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{kl, Gaussian};
use crate::i2c::{
    e_step_with, extract_controller, initial_reference, policy_reference, ControllerMode,
    I2cConfig, InferenceMode, LinearGaussianController, Posterior, Reference, ALPHA_MAX, ALPHA_MIN,
};
use crate::linalg::{self, Mat, Vector};
use crate::model::{linearize, LinearDynamics, MomentTransform, Problem};

/// Desired distribution of `x_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalTarget {
    pub target: Gaussian,
}

impl TerminalTarget {
    /// Fails unless the covariance is positive definite.
    pub fn new(target: Gaussian) -> Result<Self> {
        if target.cov.clone().cholesky().is_none() || !target.is_finite() {
            return Err(Error::InfeasibleTarget(
                "target covariance must be positive definite".into(),
            ));
        }
        Ok(TerminalTarget { target })
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }
}

/// Geometric decay of the temperature on the forward terminal belief.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSchedule {
    pub beta0: f64,
    pub decay: f64,
    pub floor: f64,
    pub max_iters: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            beta0: 1.0,
            decay: 0.7,
            floor: 0.0,
            max_iters: 60,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta0 > 0.0 && self.beta0 <= 1.0) {
            return Err(Error::Config(format!(
                "beta0 must lie in (0, 1], got {}",
                self.beta0
            )));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!(
                "decay must lie in (0, 1), got {}",
                self.decay
            )));
        }
        if !(self.floor >= 0.0 && self.floor <= self.beta0) {
            return Err(Error::Config(format!(
                "floor must lie in [0, beta0], got {}",
                self.floor
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }

    pub fn next(&self, beta: f64) -> f64 {
        (self.decay * beta).max(self.floor)
    }

    /// The first `max_iters` temperatures.
    pub fn temperatures(&self) -> Vec<f64> {
        std::iter::successors(Some(self.beta0), |&b| Some(self.next(b)))
            .take(self.max_iters)
            .collect()
    }
}

/// `p(x_T) ∝ p*(x_T) p_fwd(x_T)^beta`, computed in precision form.
/// `beta = 0` returns the target unchanged.
pub fn clamp_terminal(forward: &Gaussian, target: &TerminalTarget, beta: f64) -> Result<Gaussian> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!(
            "beta must lie in [0, 1], got {beta}"
        )));
    }
    if forward.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "forward dim {} vs target dim {}",
            forward.dim(),
            target.dim()
        )));
    }
    if beta == 0.0 {
        return Ok(target.target.clone());
    }
    let (lam_t, h_t) = information(&target.target)?;
    let (lam_f, h_f) = information(forward)?;
    from_information(&(lam_t + lam_f * beta), &(h_t + h_f * beta))
}

fn information(g: &Gaussian) -> Result<(Mat, Vector)> {
    let lam = linalg::spd_inverse(&g.cov)?;
    let h = &lam * &g.mean;
    Ok((lam, h))
}

fn from_information(lam: &Mat, h: &Vector) -> Result<Gaussian> {
    let cov = linalg::symmetrize(&linalg::spd_inverse(lam)?);
    Ok(Gaussian::from_parts(&cov * h, cov))
}

/// Exact moments of `x_t` under `x_{t+1} = A x + B u + c + eta`,
/// `u ~ N(K x + k, Sigma_u)`. `noise[t]` is the covariance of `eta_t`.
pub fn closed_loop_moments(
    stages: &[LinearDynamics],
    noise: &[Mat],
    x0: &Gaussian,
    controller: &LinearGaussianController,
) -> Result<Vec<Gaussian>> {
    let horizon = controller.horizon();
    if stages.len() != horizon || noise.len() != horizon {
        return Err(Error::LengthMismatch(format!(
            "{} dynamics stages and {} noise terms for a {horizon}-stage controller",
            stages.len(),
            noise.len()
        )));
    }
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(horizon + 1);
    for t in 0..horizon {
        let s = &stages[t];
        let (k, off, su) = (
            &controller.gains[t],
            &controller.offsets[t],
            &controller.action_cov[t],
        );
        if s.a.shape() != (x.dim(), x.dim()) || s.b.ncols() != k.nrows() || k.ncols() != x.dim() {
            return Err(Error::ShapeMismatch(format!("closed-loop stage {t}")));
        }
        let acl = &s.a + &s.b * k;
        let mean = &acl * &x.mean + &s.b * off + &s.c;
        let cov = &acl * &x.cov * acl.transpose() + &s.b * su * s.b.transpose() + &noise[t];
        out.push(x);
        x = Gaussian::from_parts(mean, linalg::symmetrize(&cov));
    }
    out.push(x);
    Ok(out)
}

/// Closed-loop state moments of a controller on a problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    pub states: Vec<Gaussian>,
    /// False when the dynamics were linearized along the way.
    pub exact: bool,
}

/// Closed-loop moments with the model's process noise. Nonlinear dynamics are
/// linearized stage by stage about the propagated closed-loop joint using
/// the configured moment transform, and the linearization residual is
/// counted as extra noise.
pub fn closed_loop(
    problem: &Problem,
    cfg: &I2cConfig,
    controller: &LinearGaussianController,
) -> Result<ClosedLoop> {
    let horizon = problem.horizon();
    if controller.horizon() != horizon {
        return Err(Error::LengthMismatch(format!(
            "controller horizon {} vs {horizon}",
            controller.horizon()
        )));
    }
    let noise: Vec<Mat> = (0..horizon)
        .map(|t| problem.dynamics.noise_cov(t).clone())
        .collect();
    if let Some(lin) = &problem.dynamics.linear {
        let stages = vec![lin.clone(); horizon];
        return Ok(ClosedLoop {
            states: closed_loop_moments(&stages, &noise, &problem.x0, controller)?,
            exact: true,
        });
    }

    let dx = problem.dynamics.dx;
    let transform = MomentTransform {
        kind: cfg.transform,
        jacobian: cfg.jacobian,
    };
    let map = &problem.dynamics.map;
    let mut x = problem.x0.clone();
    let mut states = Vec::with_capacity(horizon + 1);
    for t in 0..horizon {
        let joint = policy_joint(
            &x,
            &controller.gains[t],
            &controller.offsets[t],
            &controller.action_cov[t],
        );
        let f = |z: &Vector| map.joint_eval(z, dx, t);
        let j = |z: &Vector| {
            let (a, b) = map.jacobian(
                &z.rows(0, dx).into_owned(),
                &z.rows(dx, z.len() - dx).into_owned(),
                t,
                cfg.jacobian,
            );
            let mut out = Mat::zeros(dx, z.len());
            out.view_mut((0, 0), a.shape()).copy_from(&a);
            out.view_mut((0, dx), b.shape()).copy_from(&b);
            out
        };
        let lin = linearize(
            transform,
            &f,
            if map.has_analytic_jacobian() {
                Some(&j)
            } else {
                None
            },
            &joint,
        )?;
        let mean = &lin.jac * &joint.mean + &lin.offset;
        let cov = &lin.jac * &joint.cov * lin.jac.transpose() + &lin.residual + &noise[t];
        states.push(x);
        x = Gaussian::from_parts(mean, linalg::symmetrize(&cov));
        if !x.is_finite() {
            return Err(Error::NonFiniteState { stage: t + 1 });
        }
    }
    states.push(x);
    Ok(ClosedLoop {
        states,
        exact: false,
    })
}

fn policy_joint(x: &Gaussian, k: &Mat, offset: &Vector, action_cov: &Mat) -> Gaussian {
    let dx = x.dim();
    let sk = &x.cov * k.transpose();
    let mut cov = linalg::block_diag(&x.cov, &(k * &sk + action_cov));
    cov.view_mut((0, dx), sk.shape()).copy_from(&sk);
    cov.view_mut((dx, 0), (sk.ncols(), sk.nrows()))
        .copy_from(&sk.transpose());
    Gaussian::from_parts(linalg::stack(&x.mean, &(k * &x.mean + offset)), cov)
}

/// Outcome of [`cc_solve`].
#[derive(Debug, Clone)]
pub struct CcSolution {
    pub posterior: Posterior,
    /// Feedback-mode controller extracted from the final posterior.
    pub controller: LinearGaussianController,
    /// Closed-loop terminal distribution of `controller`.
    pub achieved: Gaussian,
    /// `KL(achieved || target)` after each outer iteration.
    pub kl_trace: Vec<f64>,
    pub beta_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// False when the closed loop was evaluated on linearized dynamics.
    pub exact: bool,
}

/// Linear models need the target to be wider than the noise injected after
/// the last control: `Sigma* - Sigma_eta,T-1` positive definite.
pub fn check_feasible(problem: &Problem, target: &TerminalTarget) -> Result<()> {
    if target.dim() != problem.dynamics.dx {
        return Err(Error::ShapeMismatch(format!(
            "target dim {} vs state dim {}",
            target.dim(),
            problem.dynamics.dx
        )));
    }
    let last = problem.dynamics.noise_cov(problem.horizon() - 1);
    if (&target.target.cov - last).cholesky().is_none() {
        return Err(Error::InfeasibleTarget(
            "target covariance minus the final-stage process noise is not positive definite".into(),
        ));
    }
    Ok(())
}

/// Terminal belief of the smoother in packed information form: the upper
/// triangle of the precision row by row, then precision times mean.
#[derive(Debug, Clone, PartialEq)]
struct Packed(Vec<f64>);

impl Packed {
    fn pack(lam: &Mat, h: &Vector) -> Self {
        let n = h.len();
        let mut v = Vec::with_capacity(n * (n + 1) / 2 + n);
        for i in 0..n {
            for j in i..n {
                v.push(lam[(i, j)]);
            }
        }
        v.extend(h.iter());
        Packed(v)
    }

    fn unpack(&self, dx: usize) -> (Mat, Vector) {
        let mut lam = Mat::zeros(dx, dx);
        let mut it = self.0.iter();
        for i in 0..dx {
            for j in i..dx {
                let v = *it.next().expect("packed length");
                lam[(i, j)] = v;
                lam[(j, i)] = v;
            }
        }
        (lam, Vector::from_iterator(dx, it.copied()))
    }

    fn axpy(&self, s: f64, d: &[f64]) -> Self {
        Packed(self.0.iter().zip(d).map(|(a, b)| a + s * b).collect())
    }
}

struct Evaluation {
    posterior: Posterior,
    controller: LinearGaussianController,
    achieved: Gaussian,
    exact: bool,
}

fn evaluate(
    problem: &Problem,
    cfg: &I2cConfig,
    reference: &Reference,
    alpha: f64,
    factor: &Packed,
) -> Result<Evaluation> {
    let (lam, h) = factor.unpack(problem.dynamics.dx);
    if lam.clone().cholesky().is_none() {
        return Err(Error::DivergedInference {
            stage: problem.horizon(),
            reason: "terminal belief lost positive definiteness".into(),
        });
    }
    let terminal = from_information(&lam, &h)?;
    let clamp = |_: &Gaussian| -> Result<Gaussian> { Ok(terminal.clone()) };
    let posterior = e_step_with(problem, cfg, reference, alpha, Some(&clamp))?;
    let controller = extract_controller(&posterior, ControllerMode::Fb, cfg.expert_p)?;
    let cl = closed_loop(problem, cfg, &controller)?;
    let achieved = cl
        .states
        .last()
        .expect("closed loop has a terminal state")
        .clone();
    Ok(Evaluation {
        posterior,
        controller,
        achieved,
        exact: cl.exact,
    })
}

/// Mismatch between achieved and desired terminal densities in packed
/// information form.
fn mismatch(achieved: &Gaussian, desired: &(Mat, Vector)) -> Result<Vec<f64>> {
    let (lam, h) = information(achieved)?;
    Ok(Packed::pack(&(lam - &desired.0), &(h - &desired.1)).0)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Newton step on the smoother's terminal belief so that the closed loop
/// moves onto `desired`, with a forward-difference Jacobian and step halving.
/// Falls back to the plain density-ratio update when no Newton step reduces
/// the mismatch.
fn correct_factor(
    problem: &Problem,
    cfg: &I2cConfig,
    reference: &Reference,
    alpha: f64,
    factor: &Packed,
    achieved: &Gaussian,
    desired: &(Mat, Vector),
) -> Result<Packed> {
    let r0 = mismatch(achieved, desired)?;
    let base = norm(&r0);
    let valid = |p: &Packed| {
        evaluate(problem, cfg, reference, alpha, p).and_then(|e| mismatch(&e.achieved, desired))
    };
    let ratio_step = || -> Packed {
        let mut step = 1.0;
        for _ in 0..30 {
            let trial = factor.axpy(-step, &r0);
            if valid(&trial).is_ok() {
                return trial;
            }
            step *= 0.5;
        }
        factor.clone()
    };
    let n = r0.len();
    let mut jac = Mat::zeros(n, n);
    for i in 0..n {
        let h = 1e-6 * factor.0[i].abs().max(1.0);
        let mut probe = factor.clone();
        probe.0[i] += h;
        let Ok(r) = valid(&probe) else {
            return Ok(ratio_step());
        };
        for k in 0..n {
            jac[(k, i)] = (r[k] - r0[k]) / h;
        }
    }
    let Some(delta) = jac.lu().solve(&Vector::from_column_slice(&r0)) else {
        return Ok(ratio_step());
    };
    let mut step = 1.0;
    for _ in 0..20 {
        let trial = factor.axpy(-step, delta.as_slice());
        if let Ok(r) = valid(&trial) {
            if norm(&r) < base {
                return Ok(trial);
            }
        }
        step *= 0.5;
    }
    Ok(ratio_step())
}

/// Covariance control by repeated smoothing with an annealed terminal clamp.
///
/// Each outer iteration smooths with the current terminal factor, extracts
/// the feedback controller and evaluates its closed-loop terminal
/// distribution. The factor is then corrected so that the closed loop moves
/// onto `clamp(achieved, target, beta)`. Stops once
/// `KL(achieved || target) < tol_kl`. The cost's own terminal term is
/// ignored. The feasibility check is enforced for linear dynamics only.
///
/// The scale stays at `alpha0`: with the terminal clamped the factor plays
/// the role of the multiplier and the likelihood keeps growing with alpha, so
/// `alpha_update` is not consulted.
///
/// Smoothing always runs certainty-equivalent. With process noise in the
/// smoother the posterior explains a sharp terminal factor away as noise,
/// which caps the feedback it can express; the noise enters instead through
/// the closed-loop evaluation, and the factor correction absorbs it.
pub fn cc_solve(
    problem: &Problem,
    cfg: &I2cConfig,
    target: &TerminalTarget,
    sched: &AnnealSchedule,
    tol_kl: f64,
) -> Result<CcSolution> {
    cfg.validate()?;
    sched.validate()?;
    let cfg = &I2cConfig {
        mode: InferenceMode::CertaintyEquivalent,
        ..cfg.clone()
    };
    if problem.dynamics.is_linear() {
        check_feasible(problem, target)?;
    } else if target.dim() != problem.dynamics.dx {
        return Err(Error::ShapeMismatch(format!(
            "target dim {} vs state dim {}",
            target.dim(),
            problem.dynamics.dx
        )));
    }

    let alpha = cfg.alpha0.clamp(ALPHA_MIN, ALPHA_MAX);
    let mut beta = sched.beta0;
    let mut reference = initial_reference(problem, cfg)?;
    let start = information(&clamp_terminal(&reference.terminal, target, beta)?)?;
    let mut factor = Packed::pack(&start.0, &start.1);
    let mut out: Option<CcSolution> = None;
    let (mut kl_trace, mut beta_trace) = (vec![], vec![]);

    for iter in 0..sched.max_iters {
        let e = evaluate(problem, cfg, &reference, alpha, &factor)?;
        let divergence = kl(&e.achieved, &target.target)?;
        kl_trace.push(divergence);
        beta_trace.push(beta);
        let converged = divergence < tol_kl;

        if !converged {
            let desired = information(&clamp_terminal(&e.achieved, target, beta)?)?;
            factor = correct_factor(
                problem,
                cfg,
                &reference,
                alpha,
                &factor,
                &e.achieved,
                &desired,
            )?;
            if !problem.dynamics.is_linear() {
                let c = &e.controller;
                reference = policy_reference(problem, cfg, &c.gains, &c.offsets, &c.action_cov)?;
            }
            beta = sched.next(beta);
        }

        out = Some(CcSolution {
            posterior: e.posterior,
            controller: e.controller,
            achieved: e.achieved,
            kl_trace: vec![],
            beta_trace: vec![],
            iterations: iter + 1,
            converged,
            exact: e.exact,
        });
        if converged {
            break;
        }
    }
    let mut sol = out.expect("schedule runs at least one iteration");
    sol.kl_trace = kl_trace;
    sol.beta_trace = beta_trace;
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_env, Physics};
    use crate::gaussian::fuse;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn scalar_target(mean: f64, var: f64) -> TerminalTarget {
        TerminalTarget::new(Gaussian::scalar(mean, var)).unwrap()
    }

    fn scalar_stage(a: f64, b: f64) -> LinearDynamics {
        LinearDynamics {
            a: dmatrix![a],
            b: dmatrix![b],
            c: dvector![0.0],
        }
    }

    #[test]
    fn clamp_limits() {
        let target = TerminalTarget::new(
            Gaussian::new(dvector![0.3, -1.0], dmatrix![0.5, 0.1; 0.1, 0.2]).unwrap(),
        )
        .unwrap();
        let fwd = Gaussian::new(dvector![2.0, 1.0], dmatrix![1.5, -0.3; -0.3, 0.7]).unwrap();
        assert_eq!(clamp_terminal(&fwd, &target, 0.0).unwrap(), target.target);

        let product = fuse(&target.target, &fwd).unwrap();
        let clamped = clamp_terminal(&fwd, &target, 1.0).unwrap();
        assert_relative_eq!(clamped.mean, product.mean, epsilon = 1e-12);
        assert_relative_eq!(clamped.cov, product.cov, epsilon = 1e-12);

        assert!(clamp_terminal(&fwd, &target, 1.5).is_err());
        assert!(clamp_terminal(&Gaussian::scalar(0.0, 1.0), &target, 0.5).is_err());
    }

    #[test]
    fn scalar_clamp_matches_grid_normalization() {
        let clamped =
            clamp_terminal(&Gaussian::scalar(2.0, 1.0), &scalar_target(0.0, 1.0), 0.5).unwrap();
        assert_relative_eq!(clamped.mean[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(clamped.cov[(0, 0)], 2.0 / 3.0, epsilon = 1e-12);

        // moments of exp(-x^2/2) * exp(-(x-2)^2/2)^0.5 by quadrature
        let (lo, hi, n) = (-12.0, 14.0, 200_000);
        let h = (hi - lo) / n as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let w = (-0.5 * x * x - 0.25 * (x - 2.0) * (x - 2.0)).exp();
            z += w;
            m1 += w * x;
            m2 += w * x * x;
        }
        let mean = m1 / z;
        assert_relative_eq!(mean, clamped.mean[0], epsilon = 1e-9);
        assert_relative_eq!(m2 / z - mean * mean, clamped.cov[(0, 0)], epsilon = 1e-9);
    }

    #[test]
    fn schedule_defaults_and_shape() {
        let s = AnnealSchedule::default();
        assert_eq!(
            (s.beta0, s.decay, s.floor, s.max_iters),
            (1.0, 0.7, 0.0, 60)
        );
        let betas = s.temperatures();
        assert_eq!(betas.len(), 60);
        assert!(betas.windows(2).all(|w| w[1] <= w[0]));
        assert!(betas.iter().all(|b| (0.0..=1.0).contains(b)));

        let floored = AnnealSchedule {
            beta0: 0.5,
            decay: 0.5,
            floor: 0.1,
            max_iters: 10,
        };
        assert_eq!(*floored.temperatures().last().unwrap(), 0.1);
        assert!(AnnealSchedule { decay: 1.0, ..s }.validate().is_err());
        assert!(AnnealSchedule { beta0: 0.0, ..s }.validate().is_err());
        assert!(AnnealSchedule { floor: 2.0, ..s }.validate().is_err());
    }

    #[test]
    fn target_must_be_positive_definite() {
        let singular = Gaussian::new(dvector![0.0, 0.0], dmatrix![1.0, 1.0; 1.0, 1.0]).unwrap();
        assert!(matches!(
            TerminalTarget::new(singular),
            Err(Error::InfeasibleTarget(_))
        ));
    }

    #[test]
    fn open_loop_moments_without_control() {
        let stage = LinearDynamics {
            a: dmatrix![1.1, 0.1; 0.0, 1.05],
            b: dmatrix![0.0; 0.1],
            c: dvector![0.2, 0.0],
        };
        let noise = dmatrix![0.1, 0.0; 0.0, 0.1];
        let horizon = 6;
        let offsets: Vec<Vector> = (0..horizon).map(|t| dvector![t as f64 - 2.0]).collect();
        let ctrl = LinearGaussianController::feedback(
            vec![Mat::zeros(1, 2); horizon],
            offsets.clone(),
            vec![Mat::zeros(1, 1); horizon],
        )
        .unwrap();
        let x0 = Gaussian::new(dvector![1.0, -1.0], dmatrix![0.3, 0.05; 0.05, 0.2]).unwrap();
        let got = closed_loop_moments(
            &vec![stage.clone(); horizon],
            &vec![noise.clone(); horizon],
            &x0,
            &ctrl,
        )
        .unwrap();
        assert_eq!(got.len(), horizon + 1);

        let (mut mu, mut sigma) = (x0.mean.clone(), x0.cov.clone());
        for t in 0..horizon {
            assert_relative_eq!(got[t].mean, mu, epsilon = 1e-12);
            assert_relative_eq!(got[t].cov, sigma, epsilon = 1e-12);
            mu = &stage.a * &mu + &stage.b * &offsets[t] + &stage.c;
            sigma = &stage.a * &sigma * stage.a.transpose() + &noise;
        }
        assert_relative_eq!(got[horizon].mean, mu, epsilon = 1e-12);
        assert_relative_eq!(got[horizon].cov, sigma, epsilon = 1e-12);
    }

    #[test]
    fn stabilizing_gain_bounds_variance() {
        // x' = 1.2 x + u + w, w ~ N(0, 0.1); u = -0.7 x gives a closed-loop pole at 0.5
        let horizon = 50;
        let stages = vec![scalar_stage(1.2, 1.0); horizon];
        let noise = vec![dmatrix![0.1]; horizon];
        let x0 = Gaussian::scalar(1.0, 1.0);
        let zero = vec![Mat::zeros(1, 1); horizon];
        let offsets = vec![dvector![0.0]; horizon];
        let open = LinearGaussianController::feedback(zero.clone(), offsets.clone(), zero.clone())
            .unwrap();
        let closed =
            LinearGaussianController::feedback(vec![dmatrix![-0.7]; horizon], offsets, zero)
                .unwrap();
        let open = closed_loop_moments(&stages, &noise, &x0, &open).unwrap();
        let closed = closed_loop_moments(&stages, &noise, &x0, &closed).unwrap();

        let (mut v_open, mut v_closed) = (1.0, 1.0);
        for t in 0..=horizon {
            assert_relative_eq!(open[t].cov[(0, 0)], v_open, max_relative = 1e-12);
            assert_relative_eq!(closed[t].cov[(0, 0)], v_closed, max_relative = 1e-12);
            v_open = 1.44 * v_open + 0.1;
            v_closed = 0.25 * v_closed + 0.1;
        }
        assert!(closed.iter().all(|g| g.cov[(0, 0)] <= 1.0));
        assert!(open[horizon].cov[(0, 0)] > 1e6);
    }

    #[test]
    fn controller_noise_inflates_every_stage() {
        let env = make_env("linear-unstable").unwrap();
        let Physics::Linear(lin) = env.physics.clone() else {
            unreachable!()
        };
        let horizon = 20;
        let gains = vec![dmatrix![-2.0, -8.0]; horizon];
        let offsets = vec![dvector![0.0]; horizon];
        let quiet = LinearGaussianController::feedback(
            gains.clone(),
            offsets.clone(),
            vec![Mat::zeros(1, 1); horizon],
        )
        .unwrap();
        let noisy =
            LinearGaussianController::feedback(gains, offsets, vec![dmatrix![0.3]; horizon])
                .unwrap();
        let stages = vec![lin; horizon];
        let noise = vec![env.noise.clone(); horizon];
        let a = closed_loop_moments(&stages, &noise, &env.x0, &quiet).unwrap();
        let b = closed_loop_moments(&stages, &noise, &env.x0, &noisy).unwrap();
        for t in 1..=horizon {
            assert!(linalg::is_psd(&(&b[t].cov - &a[t].cov)));
            assert!(b[t].cov.trace() > a[t].cov.trace());
        }
    }

    #[test]
    fn closed_loop_rejects_bad_lengths() {
        let ctrl = LinearGaussianController::feedback(
            vec![dmatrix![0.0]; 3],
            vec![dvector![0.0]; 3],
            vec![dmatrix![0.0]; 3],
        )
        .unwrap();
        let err = closed_loop_moments(
            &[scalar_stage(1.0, 1.0)],
            &[dmatrix![0.0]],
            &Gaussian::scalar(0.0, 1.0),
            &ctrl,
        );
        assert!(matches!(err, Err(Error::LengthMismatch(_))));
    }

    fn linear_env_problem() -> Problem {
        make_env("linear-unstable").unwrap().problem(true).unwrap()
    }

    #[test]
    fn linear_target_reached_exactly() {
        let problem = linear_env_problem();
        let target = TerminalTarget::new(
            Gaussian::new(dvector![0.0, 0.0], Mat::identity(2, 2) * 0.5).unwrap(),
        )
        .unwrap();
        let sol = cc_solve(
            &problem,
            &I2cConfig::default(),
            &target,
            &AnnealSchedule::default(),
            1e-6,
        )
        .unwrap();
        assert!(sol.converged, "kl trace {:?}", sol.kl_trace);
        assert!(sol.exact);
        assert!(sol.iterations <= 60);
        let last = *sol.kl_trace.last().unwrap();
        assert!(last < 1e-6);
        assert_relative_eq!(
            kl(&sol.achieved, &target.target).unwrap(),
            last,
            epsilon = 1e-15
        );
        assert_eq!(sol.kl_trace.len(), sol.beta_trace.len());
    }

    #[test]
    fn target_tighter_than_final_noise_is_infeasible() {
        let problem = linear_env_problem();
        let target = TerminalTarget::new(
            Gaussian::new(dvector![0.0, 0.0], Mat::identity(2, 2) * 0.05).unwrap(),
        )
        .unwrap();
        let err = cc_solve(
            &problem,
            &I2cConfig::default(),
            &target,
            &AnnealSchedule::default(),
            1e-6,
        );
        assert!(matches!(err, Err(Error::InfeasibleTarget(_))));
    }

    #[test]
    fn uncontrolled_target_needs_no_mean_input() {
        let env = make_env("linear-unstable").unwrap();
        let problem = env.problem(true).unwrap();
        let lin = problem.dynamics.linear.clone().unwrap();
        let mut x = problem.x0.clone();
        for _ in 0..problem.horizon() {
            x = Gaussian::new(
                &lin.a * &x.mean,
                &lin.a * &x.cov * lin.a.transpose() + &env.noise,
            )
            .unwrap();
        }
        let sol = cc_solve(
            &problem,
            &I2cConfig::default(),
            &TerminalTarget::new(x).unwrap(),
            &AnnealSchedule::default(),
            1e-6,
        )
        .unwrap();
        assert!(sol.converged);
        let energy: f64 = sol
            .posterior
            .input_means()
            .iter()
            .map(|u| u.norm_squared())
            .sum();
        let gains: f64 = sol.controller.gains.iter().map(|k| k.norm_squared()).sum();
        assert!(energy < 1e-6, "mean input energy {energy}");
        assert!(gains < 0.1, "feedback energy {gains}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn clamp_is_continuous_and_kl_grows_with_beta(
            mt in -3.0f64..3.0, vt in 0.05f64..5.0, mf in -3.0f64..3.0, vf in 0.05f64..5.0,
        ) {
            let target = scalar_target(mt, vt);
            let fwd = Gaussian::scalar(mf, vf);
            let grid: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
            let mut prev = None;
            for &b in &grid {
                let c = clamp_terminal(&fwd, &target, b).unwrap();
                let d = kl(&c, &target.target).unwrap();
                if let Some(pd) = prev {
                    prop_assert!(d >= pd - 1e-12);
                }
                prev = Some(d);
                // derivatives are bounded by vt^2 / vf and |mt - mf| vt / vf < 2e3
                let near = clamp_terminal(&fwd, &target, (b + 1e-9).min(1.0)).unwrap();
                prop_assert!((near.mean[0] - c.mean[0]).abs() < 1e-5);
                prop_assert!((near.cov[(0, 0)] - c.cov[(0, 0)]).abs() < 1e-5);
            }
            let tiny = clamp_terminal(&fwd, &target, 1e-9).unwrap();
            prop_assert!((tiny.mean[0] - mt).abs() < 1e-6 && (tiny.cov[(0, 0)] - vt).abs() < 1e-6);
        }
    }
}
