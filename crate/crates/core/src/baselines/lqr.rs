//! Backward Riccati recursions for linear dynamics and quadratic costs.
//!
//! Costs use the convention
//! `x^T Q x + u^T R u + 2 x^T N u + 2 q^T x + 2 r^T u + c` per stage and
//! `x^T Q_T x + 2 q_T^T x + c_T` at the end; value functions are
//! `V_t(x) = x^T P_t x + 2 p_t^T x + p0_t` and policies are `u = K x + k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{local_linear_model, JacobianSource, Problem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStage {
    pub a: Mat,
    pub b: Mat,
    pub c: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticStage {
    pub q: Mat,
    pub r: Mat,
    pub n: Mat,
    pub qv: Vector,
    pub rv: Vector,
    pub c: f64,
}

impl QuadraticStage {
    pub fn diagonal(q: Mat, r: Mat) -> Self {
        let (dx, du) = (q.nrows(), r.nrows());
        Self {
            q,
            r,
            n: Mat::zeros(dx, du),
            qv: Vector::zeros(dx),
            rv: Vector::zeros(du),
            c: 0.0,
        }
    }

    pub fn eval(&self, x: &Vector, u: &Vector) -> f64 {
        x.dot(&(&self.q * x))
            + u.dot(&(&self.r * u))
            + 2.0 * x.dot(&(&self.n * u))
            + 2.0 * self.qv.dot(x)
            + 2.0 * self.rv.dot(u)
            + self.c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqProblem {
    /// One entry (time invariant) or one per stage.
    pub dynamics: Vec<LinearStage>,
    /// One entry (time invariant) or one per stage.
    pub costs: Vec<QuadraticStage>,
    pub terminal_q: Mat,
    pub terminal_qv: Vector,
    pub terminal_c: f64,
    pub horizon: usize,
}

impl LqProblem {
    pub fn dynamics_at(&self, t: usize) -> &LinearStage {
        &self.dynamics[t.min(self.dynamics.len() - 1)]
    }

    pub fn cost_at(&self, t: usize) -> &QuadraticStage {
        &self.costs[t.min(self.costs.len() - 1)]
    }

    pub fn dx(&self) -> usize {
        self.dynamics[0].a.nrows()
    }

    pub fn du(&self) -> usize {
        self.dynamics[0].b.ncols()
    }

    /// Expands a general problem about a nominal trajectory (exact when the
    /// dynamics and residuals are affine).
    pub fn from_problem(problem: &Problem, states: &[Vector], inputs: &[Vector]) -> Result<Self> {
        Self::from_problem_with(problem, states, inputs, JacobianSource::Analytic)
    }

    pub fn from_problem_with(
        problem: &Problem,
        states: &[Vector],
        inputs: &[Vector],
        source: JacobianSource,
    ) -> Result<Self> {
        let horizon = problem.horizon();
        if states.len() != horizon + 1 || inputs.len() != horizon {
            return Err(Error::LengthMismatch(format!(
                "expected {} states and {} inputs",
                horizon + 1,
                horizon
            )));
        }
        let mut dynamics = Vec::with_capacity(horizon);
        let mut costs = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let m = local_linear_model(
                &problem.dynamics,
                &problem.cost,
                &states[t],
                &inputs[t],
                t,
                source,
            );
            let w = problem.cost.weight(t);
            let off = &m.e - problem.cost.target(t);
            let hw = m.h.transpose() * w;
            let dw = m.d.transpose() * w;
            costs.push(QuadraticStage {
                q: linalg::symmetrize(&(&hw * &m.h)),
                r: linalg::symmetrize(&(&dw * &m.d)),
                n: &hw * &m.d,
                qv: &hw * &off,
                rv: &dw * &off,
                c: off.dot(&(w * &off)),
            });
            dynamics.push(LinearStage {
                a: m.a,
                b: m.b,
                c: m.c,
            });
        }
        let dx = problem.dynamics.dx;
        let (terminal_q, terminal_qv, terminal_c) = match &problem.cost.terminal {
            Some(term) => {
                let x = &states[horizon];
                let h = term.jacobian(x, source);
                let off = (term.g)(x) - &h * x - &term.target;
                let hw = h.transpose() * &term.weight;
                (
                    linalg::symmetrize(&(&hw * &h)),
                    &hw * &off,
                    off.dot(&(&term.weight * &off)),
                )
            }
            None => (Mat::zeros(dx, dx), Vector::zeros(dx), 0.0),
        };
        Ok(Self {
            dynamics,
            costs,
            terminal_q,
            terminal_qv,
            terminal_c,
            horizon,
        })
    }

    /// Deterministic rollout under a policy.
    pub fn rollout(&self, x0: &Vector, policy: &AffinePolicy) -> (Vec<Vector>, Vec<Vector>) {
        let mut xs = vec![x0.clone()];
        let mut us = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            let u = policy.action(t, &xs[t]);
            let d = self.dynamics_at(t);
            xs.push(&d.a * &xs[t] + &d.b * &u + &d.c);
            us.push(u);
        }
        (xs, us)
    }

    pub fn total_cost(&self, xs: &[Vector], us: &[Vector]) -> f64 {
        let stage: f64 = us
            .iter()
            .enumerate()
            .map(|(t, u)| self.cost_at(t).eval(&xs[t], u))
            .sum();
        let x = &xs[self.horizon];
        stage + x.dot(&(&self.terminal_q * x)) + 2.0 * self.terminal_qv.dot(x) + self.terminal_c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueQuadratic {
    pub p: Vec<Mat>,
    pub pv: Vec<Vector>,
    pub p0: Vec<f64>,
}

impl ValueQuadratic {
    pub fn eval(&self, t: usize, x: &Vector) -> f64 {
        x.dot(&(&self.p[t] * x)) + 2.0 * self.pv[t].dot(x) + self.p0[t]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinePolicy {
    pub gains: Vec<Mat>,
    pub offsets: Vec<Vector>,
}

impl AffinePolicy {
    pub fn action(&self, t: usize, x: &Vector) -> Vector {
        &self.gains[t] * x + &self.offsets[t]
    }

    pub fn horizon(&self) -> usize {
        self.gains.len()
    }
}

pub fn lqr_solve(problem: &LqProblem) -> Result<(ValueQuadratic, AffinePolicy)> {
    riccati(problem, None)
}

/// Risk-sensitive recursion: before each Riccati step the propagated
/// cost-to-go is transformed to `(P^-1 + sigma Sigma_eta)^-1` (and its linear
/// term accordingly). `sigma > 0` lowers the value curvature.
pub fn leqg_solve(
    problem: &LqProblem,
    noise: &[Mat],
    sigma: f64,
) -> Result<(ValueQuadratic, AffinePolicy)> {
    if noise.is_empty() {
        return Err(Error::ShapeMismatch(
            "need at least one noise covariance".into(),
        ));
    }
    riccati(problem, Some((noise, sigma)))
}

fn risk_transform(
    p: &Mat,
    pv: &Vector,
    noise: &Mat,
    sigma: f64,
    stage: usize,
) -> Result<(Mat, Vector)> {
    if sigma == 0.0 || noise.iter().all(|&v| v == 0.0) {
        return Ok((p.clone(), pv.clone()));
    }
    // admissibility: I + sigma S^1/2 P S^1/2 must stay positive definite
    let s_half = linalg::sym_sqrt(noise)?;
    let n = p.nrows();
    let m = Mat::identity(n, n) + (&s_half * p * &s_half) * sigma;
    if linalg::min_eigenvalue(&m) <= 1e-12 {
        return Err(Error::NeuroticBreakdown { stage, sigma });
    }
    let factor = Mat::identity(n, n) + (p * noise) * sigma;
    let lu = factor.lu();
    let pt = lu
        .solve(p)
        .ok_or(Error::NeuroticBreakdown { stage, sigma })?;
    let pvt = lu
        .solve(pv)
        .ok_or(Error::NeuroticBreakdown { stage, sigma })?;
    let pt = linalg::symmetrize(&pt);
    if !linalg::is_psd(&pt) {
        return Err(Error::NeuroticBreakdown { stage, sigma });
    }
    Ok((pt, pvt))
}

fn riccati(
    problem: &LqProblem,
    risk: Option<(&[Mat], f64)>,
) -> Result<(ValueQuadratic, AffinePolicy)> {
    let horizon = problem.horizon;
    let mut p = vec![Mat::zeros(0, 0); horizon + 1];
    let mut pv = vec![Vector::zeros(0); horizon + 1];
    let mut p0 = vec![0.0; horizon + 1];
    let mut gains = vec![Mat::zeros(0, 0); horizon];
    let mut offsets = vec![Vector::zeros(0); horizon];
    p[horizon] = problem.terminal_q.clone();
    pv[horizon] = problem.terminal_qv.clone();
    p0[horizon] = problem.terminal_c;

    for t in (0..horizon).rev() {
        let (pn, pvn) = match risk {
            Some((noise, sigma)) => risk_transform(
                &p[t + 1],
                &pv[t + 1],
                &noise[t.min(noise.len() - 1)],
                sigma,
                t,
            )?,
            None => (p[t + 1].clone(), pv[t + 1].clone()),
        };
        let d = problem.dynamics_at(t);
        let c = problem.cost_at(t);
        let at_p = d.a.transpose() * &pn;
        let bt_p = d.b.transpose() * &pn;
        let s = &pn * &d.c + &pvn;
        let qxx = &c.q + &at_p * &d.a;
        let quu = &c.r + &bt_p * &d.b;
        let qux = c.n.transpose() + &bt_p * &d.a;
        let qx = &c.qv + d.a.transpose() * &s;
        let qu = &c.rv + d.b.transpose() * &s;

        let quu = linalg::symmetrize(&quu);
        let chol = quu.clone().cholesky().ok_or(Error::SingularInput(t))?;
        let k = -chol.solve(&qux);
        let kff = -chol.solve(&qu);

        p[t] = linalg::symmetrize(&(&qxx + qux.transpose() * &k));
        pv[t] = &qx + qux.transpose() * &kff;
        p0[t] = p0[t + 1] + d.c.dot(&(&pn * &d.c)) + 2.0 * pvn.dot(&d.c) + c.c + qu.dot(&kff);
        gains[t] = k;
        offsets[t] = kff;
    }
    Ok((
        ValueQuadratic { p, pv, p0 },
        AffinePolicy { gains, offsets },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};

    fn scalar_problem(a: f64, b: f64, q: f64, r: f64, qt: f64, horizon: usize) -> LqProblem {
        LqProblem {
            dynamics: vec![LinearStage {
                a: dmatrix![a],
                b: dmatrix![b],
                c: dvector![0.0],
            }],
            costs: vec![QuadraticStage::diagonal(dmatrix![q], dmatrix![r])],
            terminal_q: dmatrix![qt],
            terminal_qv: dvector![0.0],
            terminal_c: 0.0,
            horizon,
        }
    }

    fn random_problem(rng: &mut impl Rng, dx: usize, du: usize, horizon: usize) -> LqProblem {
        let mut m = |r: usize, c: usize, s: f64| Mat::from_fn(r, c, |_, _| rng.random_range(-s..s));
        let lq = m(dx, dx, 1.0);
        let lr = m(du, du, 1.0);
        let a = m(dx, dx, 1.0);
        let b = m(dx, du, 1.0);
        let c = m(dx, 1, 0.3).column(0).into_owned();
        let qv = m(dx, 1, 0.5).column(0).into_owned();
        LqProblem {
            dynamics: vec![LinearStage { a, b, c }],
            costs: vec![QuadraticStage {
                q: &lq * lq.transpose() + Mat::identity(dx, dx) * 0.1,
                r: &lr * lr.transpose() + Mat::identity(du, du) * 0.5,
                n: Mat::zeros(dx, du),
                qv,
                rv: Vector::zeros(du),
                c: 0.0,
            }],
            terminal_q: Mat::identity(dx, dx),
            terminal_qv: Vector::zeros(dx),
            terminal_c: 0.0,
            horizon,
        }
    }

    #[test]
    fn one_stage_scalar() {
        let (v, pol) = lqr_solve(&scalar_problem(1.0, 1.0, 1.0, 1.0, 1.0, 1)).unwrap();
        assert_relative_eq!(pol.gains[0][(0, 0)], -0.5, epsilon = 1e-14);
        assert_relative_eq!(v.p[0][(0, 0)], 1.5, epsilon = 1e-14);
        // grid oracle on u0 for x0 = 1: cost u^2 + 1 + (1 + u)^2
        let best = (0..=20000)
            .map(|i| -2.0 + i as f64 * 2e-4)
            .min_by(|a, b| {
                let f = |u: f64| u * u + 1.0 + (1.0 + u).powi(2);
                f(*a).total_cmp(&f(*b))
            })
            .unwrap();
        assert!((best - pol.action(0, &dvector![1.0])[0]).abs() < 2e-4);
    }

    #[test]
    fn no_control_authority_means_zero_gain() {
        let mut p = scalar_problem(1.2, 0.0, 0.0, 1.0, 3.0, 5);
        p.costs[0].q = dmatrix![0.0];
        let (_, pol) = lqr_solve(&p).unwrap();
        assert!(pol.gains.iter().all(|k| k[(0, 0)] == 0.0));
    }

    #[test]
    fn converges_to_dare() {
        let a = dmatrix![1.1, 0.1; 0.0, 1.05];
        let b = dmatrix![0.0; 0.1];
        let q = Mat::identity(2, 2);
        let r = dmatrix![1.0];
        let prob = LqProblem {
            dynamics: vec![LinearStage {
                a: a.clone(),
                b: b.clone(),
                c: Vector::zeros(2),
            }],
            costs: vec![QuadraticStage::diagonal(q.clone(), r.clone())],
            terminal_q: Mat::zeros(2, 2),
            terminal_qv: Vector::zeros(2),
            terminal_c: 0.0,
            horizon: 500,
        };
        let (v, _) = lqr_solve(&prob).unwrap();
        assert!((&v.p[0] - &v.p[1]).norm() < 1e-10);
        let p = &v.p[0];
        let btp = b.transpose() * p;
        let resid = &q + a.transpose() * p * &a
            - a.transpose() * p * &b * (&r + &btp * &b).try_inverse().unwrap() * &btp * &a
            - p;
        assert!(resid.norm() < 1e-8 * p.norm());
    }

    #[test]
    fn value_matches_rollout_cost() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let prob = random_problem(&mut rng, 3, 2, 6);
        let (v, pol) = lqr_solve(&prob).unwrap();
        let x0 = dvector![0.4, -1.0, 0.3];
        let (xs, us) = prob.rollout(&x0, &pol);
        assert_relative_eq!(
            prob.total_cost(&xs, &us),
            v.eval(0, &x0),
            max_relative = 1e-10
        );
    }

    #[test]
    fn open_loop_optimality_under_perturbation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let dx = rng.random_range(1..=3);
            let du = rng.random_range(1..=dx);
            let horizon = rng.random_range(1..=5);
            let prob = random_problem(&mut rng, dx, du, horizon);
            let (_, pol) = lqr_solve(&prob).unwrap();
            let x0 = Vector::from_fn(dx, |_, _| rng.random_range(-1.0..1.0));
            let (xs, us) = prob.rollout(&x0, &pol);
            let base = prob.total_cost(&xs, &us);
            let open = AffinePolicy {
                gains: vec![Mat::zeros(du, dx); horizon],
                offsets: us.clone(),
            };
            for t in 0..horizon {
                for j in 0..du {
                    for s in [1e-3, -1e-3] {
                        let mut o = open.clone();
                        o.offsets[t][j] += s;
                        let (x2, u2) = prob.rollout(&x0, &o);
                        assert!(prob.total_cost(&x2, &u2) >= base - 1e-12 * base.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn leqg_degeneracies() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let prob = random_problem(&mut rng, 2, 1, 10);
        let (_, lqr) = lqr_solve(&prob).unwrap();
        let noise = vec![Mat::identity(2, 2) * 0.3];
        let (_, zero) = leqg_solve(&prob, &noise, 0.0).unwrap();
        for t in 0..10 {
            assert!((&zero.gains[t] - &lqr.gains[t]).abs().max() <= 1e-12);
        }
        for sigma in [-0.5, 0.5] {
            let (_, pol) = leqg_solve(&prob, &[Mat::zeros(2, 2)], sigma).unwrap();
            for t in 0..10 {
                assert!((&pol.gains[t] - &lqr.gains[t]).abs().max() <= 1e-12);
            }
        }
    }

    #[test]
    fn leqg_sigma_monotone_scalar() {
        // P shrinks as sigma grows, so the feedback weakens monotonically
        let prob = scalar_problem(1.2, 1.0, 1.0, 1.0, 1.0, 8);
        let noise = [dmatrix![0.5]];
        let (_, lqr) = lqr_solve(&prob).unwrap();
        let k_lqr = lqr.gains[0][(0, 0)];
        let mut prev = f64::NEG_INFINITY;
        let mut gains = Vec::new();
        for i in -8..=8 {
            let sigma = i as f64 * 0.05;
            let (_, pol) = leqg_solve(&prob, &noise, sigma).unwrap();
            let k = pol.gains[0][(0, 0)];
            assert!(k >= prev);
            prev = k;
            gains.push((sigma, k));
        }
        for (sigma, k) in gains {
            if sigma > 0.0 {
                assert!(k > k_lqr);
            } else if sigma < 0.0 {
                assert!(k < k_lqr);
            }
        }
    }

    #[test]
    fn leqg_continuous_at_zero() {
        let prob = scalar_problem(1.1, 0.5, 1.0, 0.3, 2.0, 6);
        let noise = [dmatrix![0.2]];
        let k = |s: f64| leqg_solve(&prob, &noise, s).unwrap().1.gains[0][(0, 0)];
        let h = 1e-7;
        assert!((k(h) - k(0.0)).abs() < 1e-5);
        assert!((k(-h) - k(0.0)).abs() < 1e-5);
    }

    #[test]
    fn neurotic_breakdown_detected() {
        let prob = scalar_problem(1.5, 1.0, 1.0, 1.0, 10.0, 5);
        let r = leqg_solve(&prob, &[dmatrix![1.0]], -5.0);
        assert!(matches!(r, Err(Error::NeuroticBreakdown { .. })));
    }

    #[test]
    fn singular_input_hessian() {
        let mut p = scalar_problem(1.0, 0.0, 1.0, 0.0, 1.0, 2);
        p.costs[0].r = dmatrix![0.0];
        assert!(matches!(lqr_solve(&p), Err(Error::SingularInput(_))));
    }
}
