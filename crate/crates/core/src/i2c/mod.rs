//! Input inference for control: EM over a state-action latent model.
//!
//! The cost `sum_t r_t^T W_t r_t` becomes pseudo-observations
//! `z_t ~ N(g_t(x_t, u_t), (alpha W_t)^-1)`. The E-step smooths joint
//! `(x_t, u_t)` beliefs given all observations; the M-step sets `alpha` to
//! the stationary point of the expected log-likelihood.

mod controller;
mod estep;
mod risk;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use controller::{extract_controller, LinearGaussianController};
pub use estep::{
    e_step, e_step_with, initial_reference, input_prior, policy_reference, Posterior, Reference,
    TerminalMap, CE_NOISE,
};
pub use risk::{risk_equivalent_sigma, RiskDiagnostic};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::model::{
    evaluate_cost, transform_moments, JacobianSource, MomentTransform, Problem, TransformKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    #[default]
    Stochastic,
    #[serde(alias = "ce")]
    CertaintyEquivalent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerMode {
    Ff,
    #[default]
    Fb,
    Expert,
}

impl ControllerMode {
    pub fn name(self) -> &'static str {
        match self {
            ControllerMode::Ff => "ff",
            ControllerMode::Fb => "fb",
            ControllerMode::Expert => "expert",
        }
    }
}

impl FromStr for ControllerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ff" => Ok(Self::Ff),
            "fb" => Ok(Self::Fb),
            "expert" | "e" => Ok(Self::Expert),
            other => Err(Error::Config(format!("unknown controller mode '{other}'"))),
        }
    }
}

impl FromStr for InferenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stochastic" | "s" => Ok(Self::Stochastic),
            "certainty-equivalent" | "ce" => Ok(Self::CertaintyEquivalent),
            other => Err(Error::Config(format!("unknown inference mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaUpdate {
    Fixed,
    #[default]
    Em,
}

pub const ALPHA_MIN: f64 = 1e-10;
pub const ALPHA_MAX: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct I2cConfig {
    pub mode: InferenceMode,
    pub controller_mode: ControllerMode,
    pub alpha0: f64,
    pub alpha_update: AlphaUpdate,
    /// Input prior scale in cost-normalized units: the prior covariance is
    /// `sigma_u^2 / alpha0 I`.
    pub sigma_u: f64,
    pub input_prior_mean: Option<Vec<f64>>,
    pub max_em_iters: usize,
    pub e_step_sweeps: usize,
    pub tol_loglik: f64,
    pub tol_alpha: f64,
    pub expert_p: f64,
    pub transform: TransformKind,
    pub jacobian: JacobianSource,
}

impl Default for I2cConfig {
    fn default() -> Self {
        Self {
            mode: InferenceMode::Stochastic,
            controller_mode: ControllerMode::Fb,
            alpha0: 1.0,
            alpha_update: AlphaUpdate::Em,
            sigma_u: 1.0,
            input_prior_mean: None,
            max_em_iters: 100,
            e_step_sweeps: 1,
            tol_loglik: 1e-6,
            tol_alpha: 1e-4,
            expert_p: 0.95,
            transform: TransformKind::Cubature,
            jacobian: JacobianSource::Analytic,
        }
    }
}

impl I2cConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::NonPositiveAlpha(self.alpha0));
        }
        if !(self.expert_p > 0.0 && self.expert_p < 1.0) {
            return Err(Error::InvalidProbability(self.expert_p));
        }
        if !(self.tol_loglik > 0.0 && self.tol_alpha > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if !(self.sigma_u > 0.0 && self.sigma_u.is_finite()) {
            return Err(Error::Config("sigma_u must be positive".into()));
        }
        if self.e_step_sweeps == 0 {
            return Err(Error::Config("e_step_sweeps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Closed-form scale update `alpha = sum d_z / sum E[r^T W r]`.
///
/// Returns [`Error::ZeroResidual`] (carrying the capped value `ALPHA_MAX`)
/// when the expected residual vanishes.
pub fn m_step_alpha(post: &Posterior, problem: &Problem, cfg: &I2cConfig) -> Result<f64> {
    let (dims, total) = expected_residual(post, problem, cfg)?;
    if !(total > f64::MIN_POSITIVE) || dims / total > ALPHA_MAX * 1e6 {
        return Err(Error::ZeroResidual { capped: ALPHA_MAX });
    }
    Ok((dims / total).clamp(ALPHA_MIN, ALPHA_MAX))
}

/// `(sum_t d_z,t, sum_t E[r_t^T W_t r_t])` under the posterior, terminal
/// term included.
pub fn expected_residual(
    post: &Posterior,
    problem: &Problem,
    cfg: &I2cConfig,
) -> Result<(f64, f64)> {
    let mt = MomentTransform {
        kind: cfg.transform,
        jacobian: cfg.jacobian,
    };
    let dx = problem.dynamics.dx;
    let g = &problem.cost.g;
    let mut dims = 0.0;
    let mut total = 0.0;
    for (t, joint) in post.stages.iter().enumerate() {
        let f = |z: &Vector| g.joint_eval(z, dx, t);
        let j = |z: &Vector| {
            let (a, b) = g.jacobian(
                &z.rows(0, dx).into_owned(),
                &z.rows(dx, z.len() - dx).into_owned(),
                t,
                cfg.jacobian,
            );
            let mut out = crate::linalg::Mat::zeros(a.nrows(), a.ncols() + b.ncols());
            out.view_mut((0, 0), a.shape()).copy_from(&a);
            out.view_mut((0, a.ncols()), b.shape()).copy_from(&b);
            out
        };
        let (y, _) = transform_moments(
            mt,
            &f,
            if g.has_analytic_jacobian() {
                Some(&j)
            } else {
                None
            },
            &joint.gaussian,
        )?;
        total += quad_expectation(&y, problem.cost.target(t), problem.cost.weight(t));
        dims += problem.cost.stage_dim() as f64;
    }
    if let Some(term) = &problem.cost.terminal {
        let f = |v: &Vector| (term.g)(v);
        let j = |v: &Vector| term.jacobian(v, cfg.jacobian);
        let (y, _) = transform_moments(
            mt,
            &f,
            if term.jac.is_some() { Some(&j) } else { None },
            &post.terminal,
        )?;
        total += quad_expectation(&y, &term.target, &term.weight);
        dims += term.target.len() as f64;
    }
    Ok((dims, total))
}

fn quad_expectation(y: &crate::gaussian::Gaussian, z: &Vector, w: &crate::linalg::Mat) -> f64 {
    let r = &y.mean - z;
    r.dot(&(w * &r)) + (w * &y.cov).trace()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Scale used by the E-step of each iteration.
    pub alpha_trace: Vec<f64>,
    /// Log-likelihood reported by the E-step of each iteration.
    pub loglik_trace: Vec<f64>,
    /// Cost of the posterior mean trajectory after each iteration.
    pub planned_cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub max_iters_reached: bool,
    /// Set when an M-step hit a vanishing residual and alpha was capped.
    pub zero_residual: bool,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub posterior: Posterior,
    pub controller: LinearGaussianController,
    pub diagnostics: Diagnostics,
}

pub fn planned_cost(post: &Posterior, problem: &Problem) -> Result<f64> {
    evaluate_cost(&problem.cost, &post.state_means(), &post.input_means())
}

/// Alternates E- and M-steps until the log-likelihood and alpha settle.
pub fn solve(problem: &Problem, cfg: &I2cConfig) -> Result<Solution> {
    cfg.validate()?;
    let mut alpha = cfg.alpha0.clamp(ALPHA_MIN, ALPHA_MAX);
    let mut reference = initial_reference(problem, cfg)?;
    let mut diag = Diagnostics::default();
    let mut post = None;

    for _ in 0..cfg.max_em_iters {
        let mut current = None;
        for _ in 0..cfg.e_step_sweeps {
            let p = e_step(problem, cfg, &reference, alpha)?;
            let fb = extract_controller(&p, ControllerMode::Fb, cfg.expert_p)?;
            reference = policy_reference(problem, cfg, &fb.gains, &fb.offsets, &fb.action_cov)?;
            current = Some(p);
        }
        let p = current.expect("at least one sweep");
        diag.iterations += 1;
        diag.alpha_trace.push(alpha);
        diag.loglik_trace.push(p.log_likelihood);
        diag.planned_cost_trace.push(planned_cost(&p, problem)?);

        let next_alpha = match cfg.alpha_update {
            AlphaUpdate::Fixed => alpha,
            AlphaUpdate::Em => match m_step_alpha(&p, problem, cfg) {
                Ok(a) => a,
                Err(Error::ZeroResidual { capped }) => {
                    diag.zero_residual = true;
                    capped
                }
                Err(e) => return Err(e),
            },
        };

        let n = diag.loglik_trace.len();
        let ll_settled = n >= 2 && {
            let (prev, cur) = (diag.loglik_trace[n - 2], diag.loglik_trace[n - 1]);
            (cur - prev).abs() <= cfg.tol_loglik * prev.abs().max(1.0)
        };
        let alpha_settled = (next_alpha - alpha).abs() <= cfg.tol_alpha * alpha;
        post = Some(p);
        alpha = next_alpha;
        if ll_settled && alpha_settled {
            diag.converged = true;
            break;
        }
    }
    diag.max_iters_reached = !diag.converged;
    let posterior = post.ok_or_else(|| Error::Config("max_em_iters must be at least 1".into()))?;
    let controller = extract_controller(&posterior, cfg.controller_mode, cfg.expert_p)?;
    Ok(Solution {
        posterior,
        controller,
        diagnostics: diag,
    })
}
