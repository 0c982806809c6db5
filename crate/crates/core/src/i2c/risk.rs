//! Message-passing view of risk sensitivity on linear-Gaussian models.
//!
//! For each stage the pre-noise state `x'' = A x + B u + c` receives a
//! forward message (past observations) and a backward message (future
//! observations pushed back through the process noise). Their comparison
//! gives the disturbance `Sigma_hat` under which the LQR-style recursion on
//! the backward message alone reproduces the marginal precision of
//! `x_{t+1}`, which is what LEQG's `sigma Sigma_eta` term stands in for.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::JointGaussian;
use crate::i2c::estep::{
    inference_noise, input_prior, linearize_cost, linearize_dynamics, linearize_terminal, observe,
};
use crate::i2c::{I2cConfig, Posterior};
use crate::linalg::{self, Mat};
use crate::model::Problem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskDiagnostic {
    pub stage: usize,
    /// Forward message precision at `x''`.
    pub forward_precision: Mat,
    /// Backward message precision at `x_{t+1}`.
    pub backward_next: Mat,
    /// Backward message precision at `x''`: `(backward_next^-1 + Sigma_eta)^-1`.
    pub backward_precision: Mat,
    /// Marginal precision of `x''`, forward plus backward.
    pub marginal_precision: Mat,
    /// Marginal covariance of `x''` by the Woodbury form on the messages.
    pub marginal_cov_woodbury: Mat,
    /// `(marginal_cov + Sigma_eta)^-1`.
    pub next_precision: Mat,
    /// `Sigma_hat = Sigma_eta - L^-1 (F^-1 + L^-1)^-1 L^-1` with `L`, `F`
    /// the backward and forward precisions at `x''`.
    pub effective_noise: Mat,
    /// `tr(Sigma_hat) / tr(Sigma_eta)`, or 0 without process noise.
    pub effective_sigma: f64,
    /// `(backward_precision^-1 + Sigma_hat)^-1`.
    pub correction: Mat,
    /// `(backward_precision^-1 + sigma Sigma_eta)^-1` for the requested sigma.
    pub leqg_precision: Mat,
    /// Same with `-sigma`, since both sign conventions are in use.
    pub leqg_precision_negated: Mat,
}

/// `(P^-1 + s N)^-1` computed as `(I + s P N)^-1 P`, valid for singular `P`.
fn add_cov(p: &Mat, noise: &Mat, s: f64) -> Result<Mat> {
    let n = p.nrows();
    let m = Mat::identity(n, n) + p * noise * s;
    let out = m
        .lu()
        .solve(p)
        .ok_or_else(|| Error::SingularCovariance("precision transform".into()))?;
    Ok(linalg::symmetrize(&out))
}

pub fn risk_equivalent_sigma(
    problem: &Problem,
    cfg: &I2cConfig,
    post: &Posterior,
    sigma: f64,
) -> Result<Vec<RiskDiagnostic>> {
    if !problem.dynamics.is_linear() {
        return Err(Error::LinearOnly);
    }
    let horizon = problem.horizon();
    if post.horizon() != horizon {
        return Err(Error::LengthMismatch(format!(
            "posterior horizon {} != {}",
            post.horizon(),
            horizon
        )));
    }
    let (dx, du) = (problem.dynamics.dx, problem.dynamics.du);
    let alpha = post.alpha;
    let prior_u = input_prior(cfg, du);
    let prior_prec = linalg::spd_inverse(&prior_u.cov)?;

    // forward filter (covariances do not depend on the data)
    let mut x = problem.x0.clone();
    let mut fwd = Vec::with_capacity(horizon);
    let mut stage_models = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let joint = JointGaussian::independent(&x, &prior_u).gaussian;
        let gl = linearize_cost(problem, cfg, t, &post.stages[t].gaussian)?;
        let noise = linalg::spd_inverse(problem.cost.weight(t))? / alpha + &gl.residual;
        let (filt, _) = observe(&joint, &gl.jac, &gl.offset, &noise, problem.cost.target(t))?;
        let fl = linearize_dynamics(problem, cfg, t, &post.stages[t].gaussian)?;
        let pre_noise = linalg::symmetrize(&(&fl.jac * &filt.cov * fl.jac.transpose()));
        fwd.push(pre_noise.clone());
        x = crate::gaussian::Gaussian::from_parts(
            &fl.jac * &filt.mean + &fl.offset,
            pre_noise + inference_noise(problem, cfg, t),
        );
        stage_models.push((gl.jac, noise, fl.jac));
    }

    // backward information recursion
    let mut lam_next = match linearize_terminal(problem, cfg, &post.terminal)? {
        Some(tl) => {
            let term = problem.cost.terminal.as_ref().expect("terminal cost");
            let noise = linalg::spd_inverse(&term.weight)? / alpha + &tl.residual;
            linalg::symmetrize(&(tl.jac.transpose() * linalg::spd_inverse(&noise)? * &tl.jac))
        }
        None => Mat::zeros(dx, dx),
    };
    let mut out = Vec::with_capacity(horizon);
    for t in (0..horizon).rev() {
        let q = inference_noise(problem, cfg, t);
        let (c, noise, f) = &stage_models[t];
        let lam_bwd = add_cov(&lam_next, &q, 1.0)?;
        let lam_fwd = linalg::spd_inverse(&fwd[t])?;
        let marginal = &lam_fwd + &lam_bwd;
        let cov_fwd = fwd[t].clone();
        let cov_bwd = linalg::spd_inverse(&lam_bwd)?;
        let inner = linalg::spd_inverse(&(&cov_fwd + &cov_bwd))?;
        let woodbury = linalg::symmetrize(&(&cov_bwd - &cov_bwd * &inner * &cov_bwd));
        let next_precision = linalg::spd_inverse(&(&woodbury + &q))?;
        let effective_noise = linalg::symmetrize(&(&q - &cov_bwd * &inner * &cov_bwd));
        let tq = q.trace();
        let effective_sigma = if tq > 0.0 {
            effective_noise.trace() / tq
        } else {
            0.0
        };
        let correction = linalg::spd_inverse(&(&cov_bwd + &effective_noise))?;
        let leqg_precision = add_cov(&lam_bwd, &q, sigma)?;
        let leqg_precision_negated = add_cov(&lam_bwd, &q, -sigma)?;
        out.push(RiskDiagnostic {
            stage: t,
            forward_precision: lam_fwd,
            backward_next: lam_next.clone(),
            backward_precision: lam_bwd.clone(),
            marginal_precision: marginal,
            marginal_cov_woodbury: woodbury,
            next_precision,
            effective_noise,
            effective_sigma,
            correction,
            leqg_precision,
            leqg_precision_negated,
        });

        // message into x_t: stage observation and input prior, u marginalized
        let mut lam_z =
            f.transpose() * &lam_bwd * f + c.transpose() * linalg::spd_inverse(noise)? * c;
        let mut uu = lam_z.view_mut((dx, dx), (du, du));
        uu += &prior_prec;
        let lxx = lam_z.view((0, 0), (dx, dx)).into_owned();
        let lxu = lam_z.view((0, dx), (dx, du)).into_owned();
        let luu = lam_z.view((dx, dx), (du, du)).into_owned();
        lam_next = linalg::symmetrize(&(&lxx - &lxu * linalg::spd_solve(&luu, &lxu.transpose())?));
    }
    out.reverse();
    Ok(out)
}
