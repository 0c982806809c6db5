//! Forward filtering and Rauch-Tung-Striebel smoothing over joint
//! state-action beliefs, on a model linearized about reference beliefs.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, JointGaussian};
use crate::i2c::{I2cConfig, InferenceMode};
use crate::linalg::{self, Mat, Vector};
use crate::model::{linearize, Linearization, MomentTransform, Problem};

/// Process noise used in place of `Sigma_eta` by certainty-equivalent inference.
pub const CE_NOISE: f64 = 1e-9;

/// Smoothed beliefs over `(x_t, u_t)` for `t < T` and over `x_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub stages: Vec<JointGaussian>,
    pub terminal: Gaussian,
    /// `Cov[(x_t, u_t), x_{t+1}]` for `t < T`.
    pub cross_next: Vec<Mat>,
    pub alpha: f64,
    /// Log marginal likelihood of the cost pseudo-observations under the
    /// (linearized) model at `alpha`. Maximized by the EM loop.
    pub log_likelihood: f64,
}

impl Posterior {
    pub fn stage_count(&self) -> usize {
        self.stages.len() + 1
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn state(&self, t: usize) -> Result<Gaussian> {
        if t == self.horizon() {
            Ok(self.terminal.clone())
        } else if t < self.horizon() {
            self.stages[t].marginal(0)
        } else {
            Err(Error::StageOutOfRange {
                stage: t,
                horizon: self.horizon(),
            })
        }
    }

    pub fn input(&self, t: usize) -> Result<Gaussian> {
        self.stages
            .get(t)
            .ok_or(Error::StageOutOfRange {
                stage: t,
                horizon: self.horizon(),
            })?
            .marginal(1)
    }

    pub fn state_means(&self) -> Vec<Vector> {
        let mut xs: Vec<Vector> = self
            .stages
            .iter()
            .map(|j| j.mean().rows(0, j.blocks[0]).into_owned())
            .collect();
        xs.push(self.terminal.mean.clone());
        xs
    }

    pub fn input_means(&self) -> Vec<Vector> {
        self.stages
            .iter()
            .map(|j| j.mean().rows(j.blocks[0], j.blocks[1]).into_owned())
            .collect()
    }
}

/// Beliefs about which the model is linearized: joint `(x_t, u_t)` per stage
/// and `x_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub stages: Vec<Gaussian>,
    pub terminal: Gaussian,
}

/// Stage input prior `N(mu_u, sigma_u^2 / alpha0 I)`.
pub fn input_prior(cfg: &I2cConfig, du: usize) -> Gaussian {
    let mean = match &cfg.input_prior_mean {
        Some(m) => Vector::from_vec(m.clone()),
        None => Vector::zeros(du),
    };
    Gaussian::from_parts(
        mean,
        Mat::identity(du, du) * (cfg.sigma_u * cfg.sigma_u / cfg.alpha0),
    )
}

pub(crate) fn inference_noise(problem: &Problem, cfg: &I2cConfig, t: usize) -> Mat {
    let dx = problem.dynamics.dx;
    match cfg.mode {
        InferenceMode::Stochastic => problem.dynamics.noise_cov(t).clone(),
        InferenceMode::CertaintyEquivalent => Mat::identity(dx, dx) * CE_NOISE,
    }
}

fn transform(cfg: &I2cConfig) -> MomentTransform {
    MomentTransform {
        kind: cfg.transform,
        jacobian: cfg.jacobian,
    }
}

pub(crate) fn linearize_dynamics(
    problem: &Problem,
    cfg: &I2cConfig,
    t: usize,
    joint: &Gaussian,
) -> Result<Linearization> {
    let dx = problem.dynamics.dx;
    let map = &problem.dynamics.map;
    let f = |z: &Vector| map.joint_eval(z, dx, t);
    let j = |z: &Vector| {
        let (a, b) = map.jacobian(
            &z.rows(0, dx).into_owned(),
            &z.rows(dx, z.len() - dx).into_owned(),
            t,
            cfg.jacobian,
        );
        concat(&a, &b)
    };
    linearize(
        transform(cfg),
        &f,
        if map.has_analytic_jacobian() {
            Some(&j)
        } else {
            None
        },
        joint,
    )
}

pub(crate) fn linearize_cost(
    problem: &Problem,
    cfg: &I2cConfig,
    t: usize,
    joint: &Gaussian,
) -> Result<Linearization> {
    let dx = problem.dynamics.dx;
    let g = &problem.cost.g;
    let f = |z: &Vector| g.joint_eval(z, dx, t);
    let j = |z: &Vector| {
        let (a, b) = g.jacobian(
            &z.rows(0, dx).into_owned(),
            &z.rows(dx, z.len() - dx).into_owned(),
            t,
            cfg.jacobian,
        );
        concat(&a, &b)
    };
    linearize(
        transform(cfg),
        &f,
        if g.has_analytic_jacobian() {
            Some(&j)
        } else {
            None
        },
        joint,
    )
}

pub(crate) fn linearize_terminal(
    problem: &Problem,
    cfg: &I2cConfig,
    x: &Gaussian,
) -> Result<Option<Linearization>> {
    let Some(term) = &problem.cost.terminal else {
        return Ok(None);
    };
    let f = |v: &Vector| (term.g)(v);
    let j = |v: &Vector| term.jacobian(v, cfg.jacobian);
    linearize(
        transform(cfg),
        &f,
        if term.jac.is_some() { Some(&j) } else { None },
        x,
    )
    .map(Some)
}

fn concat(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

fn check(g: &Gaussian, stage: usize, what: &str) -> Result<()> {
    if !g.is_finite() {
        return Err(Error::DivergedInference {
            stage,
            reason: format!("non-finite {what}"),
        });
    }
    if !linalg::is_psd(&g.cov) {
        return Err(Error::DivergedInference {
            stage,
            reason: format!("{what} covariance lost definiteness"),
        });
    }
    Ok(())
}

/// Kalman measurement update of `prior` with `y = C z + offset + noise`
/// observing `target`. Returns the posterior and the innovation
/// log-likelihood.
pub(crate) fn observe(
    prior: &Gaussian,
    c: &Mat,
    offset: &Vector,
    noise: &Mat,
    target: &Vector,
) -> Result<(Gaussian, f64)> {
    let pc = &prior.cov * c.transpose();
    let s = linalg::symmetrize(&(c * &pc + noise));
    let v = target - c * &prior.mean - offset;
    let gain = linalg::spd_solve(&s, &pc.transpose())?.transpose();
    let mean = &prior.mean + &gain * &v;
    let n = prior.dim();
    let ikc = Mat::identity(n, n) - &gain * c;
    let cov = &ikc * &prior.cov * ikc.transpose() + &gain * noise * gain.transpose();
    let sv = linalg::spd_solve(&s, &Mat::from_column_slice(v.len(), 1, v.as_slice()))?;
    let quad = v.dot(&sv.column(0));
    let ll = -0.5 * (quad + linalg::spd_logdet(&s)? + v.len() as f64 * (2.0 * PI).ln());
    Ok((Gaussian::from_parts(mean, cov), ll))
}

/// Observation noise `(alpha W)^-1 + Omega` for a linearized residual.
fn obs_noise(weight: &Mat, alpha: f64, residual: &Mat) -> Result<Mat> {
    Ok(linalg::spd_inverse(weight)? / alpha + residual)
}

/// One forward-backward sweep at scale `alpha`, linearized about `reference`.
pub fn e_step(
    problem: &Problem,
    cfg: &I2cConfig,
    reference: &Reference,
    alpha: f64,
) -> Result<Posterior> {
    e_step_with(problem, cfg, reference, alpha, None)
}

/// Maps the forward belief over `x_T` to the belief the smoother starts from.
pub type TerminalMap<'a> = &'a dyn Fn(&Gaussian) -> Result<Gaussian>;

/// [`e_step`] with an optional replacement for the terminal observation.
/// When `terminal` is given the cost's terminal factor is ignored and the
/// backward pass starts from `terminal(forward x_T)`.
pub fn e_step_with(
    problem: &Problem,
    cfg: &I2cConfig,
    reference: &Reference,
    alpha: f64,
    terminal: Option<TerminalMap<'_>>,
) -> Result<Posterior> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::NonPositiveAlpha(alpha));
    }
    let horizon = problem.horizon();
    let (dx, du) = (problem.dynamics.dx, problem.dynamics.du);
    if reference.stages.len() != horizon {
        return Err(Error::LengthMismatch(format!(
            "{} reference stages for horizon {}",
            reference.stages.len(),
            horizon
        )));
    }
    let prior_u = input_prior(cfg, du);
    if prior_u.dim() != du {
        return Err(Error::ShapeMismatch("input prior mean dim".into()));
    }

    let mut filtered: Vec<Gaussian> = Vec::with_capacity(horizon);
    let mut predicted: Vec<Gaussian> = Vec::with_capacity(horizon);
    let mut dyn_jac: Vec<Mat> = Vec::with_capacity(horizon);
    let mut log_lik = 0.0;
    let mut x = problem.x0.clone();

    for t in 0..horizon {
        let joint = JointGaussian::independent(&x, &prior_u).gaussian;
        let gl = linearize_cost(problem, cfg, t, &reference.stages[t])?;
        let noise = obs_noise(problem.cost.weight(t), alpha, &gl.residual)?;
        let (post, ll) = observe(&joint, &gl.jac, &gl.offset, &noise, problem.cost.target(t))?;
        check(&post, t, "filtered belief")?;
        log_lik += ll;

        let fl = linearize_dynamics(problem, cfg, t, &reference.stages[t])?;
        let q = inference_noise(problem, cfg, t) + &fl.residual;
        let mean = &fl.jac * &post.mean + &fl.offset;
        let cov = linalg::symmetrize(&(&fl.jac * &post.cov * fl.jac.transpose() + q));
        x = Gaussian::from_parts(mean, cov);
        check(&x, t, "predicted state")?;
        filtered.push(post);
        predicted.push(x.clone());
        dyn_jac.push(fl.jac);
    }

    let terminal_filtered = if let Some(map) = terminal {
        map(&x)?
    } else {
        match linearize_terminal(problem, cfg, &reference.terminal)? {
            Some(tl) => {
                let term = problem
                    .cost
                    .terminal
                    .as_ref()
                    .expect("terminal linearization implies terminal cost");
                let noise = obs_noise(&term.weight, alpha, &tl.residual)?;
                let (post, ll) = observe(&x, &tl.jac, &tl.offset, &noise, &term.target)?;
                log_lik += ll;
                post
            }
            None => x,
        }
    };
    check(&terminal_filtered, horizon, "terminal belief")?;

    // backward pass
    let mut stages = Vec::with_capacity(horizon);
    let mut cross_next = Vec::with_capacity(horizon);
    let mut next = terminal_filtered.clone();
    for t in (0..horizon).rev() {
        let f = &filtered[t];
        let pred = &predicted[t];
        let pf = &f.cov * dyn_jac[t].transpose();
        let gain = linalg::spd_solve(&pred.cov, &pf.transpose())?.transpose();
        let mean = &f.mean + &gain * (&next.mean - &pred.mean);
        let cov = &f.cov + &gain * (&next.cov - &pred.cov) * gain.transpose();
        let smoothed = Gaussian::from_parts(mean, cov);
        check(&smoothed, t, "smoothed belief")?;
        cross_next.push(&gain * &next.cov);
        let joint = JointGaussian::new(smoothed, vec![dx, du])?;
        next = joint.marginal(0)?;
        stages.push(joint);
    }
    stages.reverse();
    cross_next.reverse();

    Ok(Posterior {
        stages,
        terminal: terminal_filtered,
        cross_next,
        alpha,
        log_likelihood: log_lik,
    })
}

/// Linearization points for the first sweep: the input-prior means rolled
/// forward through the moment transform.
pub fn initial_reference(problem: &Problem, cfg: &I2cConfig) -> Result<Reference> {
    let du = problem.dynamics.du;
    let mu_u = input_prior(cfg, du).mean;
    let horizon = problem.horizon();
    let mut x = problem.x0.clone();
    let mut stages = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let joint =
            JointGaussian::independent(&x, &Gaussian::from_parts(mu_u.clone(), Mat::zeros(du, du)))
                .gaussian;
        x = propagate(problem, cfg, t, &joint)?;
        stages.push(joint);
    }
    Ok(Reference {
        stages,
        terminal: x,
    })
}

/// Linearization points from the closed-loop policy `u ~ N(K x + k, S)`
/// rolled forward through the moment transform.
pub fn policy_reference(
    problem: &Problem,
    cfg: &I2cConfig,
    gains: &[Mat],
    offsets: &[Vector],
    action_cov: &[Mat],
) -> Result<Reference> {
    let horizon = problem.horizon();
    let mut x = problem.x0.clone();
    let mut stages = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let k = &gains[t];
        let mean = linalg::stack(&x.mean, &(k * &x.mean + &offsets[t]));
        let sk = &x.cov * k.transpose();
        let mut cov = linalg::block_diag(&x.cov, &(k * &sk + &action_cov[t]));
        let dx = x.dim();
        cov.view_mut((0, dx), sk.shape()).copy_from(&sk);
        cov.view_mut((dx, 0), (sk.ncols(), sk.nrows()))
            .copy_from(&sk.transpose());
        let joint = Gaussian::from_parts(mean, cov);
        x = propagate(problem, cfg, t, &joint)?;
        if !x.is_finite() {
            return Err(Error::DivergedInference {
                stage: t,
                reason: "reference rollout diverged".into(),
            });
        }
        stages.push(joint);
    }
    Ok(Reference {
        stages,
        terminal: x,
    })
}

fn propagate(problem: &Problem, cfg: &I2cConfig, t: usize, joint: &Gaussian) -> Result<Gaussian> {
    let fl = linearize_dynamics(problem, cfg, t, joint)?;
    let mean = &fl.jac * &joint.mean + &fl.offset;
    let cov =
        &fl.jac * &joint.cov * fl.jac.transpose() + &fl.residual + inference_noise(problem, cfg, t);
    Ok(Gaussian::from_parts(mean, linalg::symmetrize(&cov)))
}
