//! Benchmark systems: an open-loop unstable linear system, pendulum swing-up
//! and cartpole swing-up. Angles are measured from upright (`theta = 0`).

use std::sync::Arc;

use nalgebra::{dmatrix, dvector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::linalg::{self, Mat, Vector};
use crate::model::{CostModel, DynamicsModel, LinearDynamics, Problem, StageMap};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    LinearUnstable,
    Pendulum,
    Cartpole,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-unstable" => Ok(Self::LinearUnstable),
            "pendulum" => Ok(Self::Pendulum),
            "cartpole" => Ok(Self::Cartpole),
            other => Err(Error::UnknownEnvironment(other.to_string())),
        }
    }
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::LinearUnstable => "linear-unstable",
            Self::Pendulum => "pendulum",
            Self::Cartpole => "cartpole",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartpoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Physics {
    Linear(LinearDynamics),
    Pendulum(PendulumParams),
    Cartpole(CartpoleParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StageCostSpec {
    /// `(x - x_g)^T Q (x - x_g) + u^T R u` with terminal `Q_T`.
    Quadratic { q: Mat, r: Mat, q_terminal: Mat },
    /// `u^T R u` only.
    MinEnergy { r: Mat },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub dx: usize,
    pub du: usize,
    pub dt: f64,
    pub horizon: usize,
    pub u_limit: Vector,
    pub x0: Gaussian,
    pub noise: Mat,
    pub goal: Vector,
    pub cost: StageCostSpec,
    pub physics: Physics,
}

pub fn make_env(name: &str) -> Result<EnvSpec> {
    let kind: EnvKind = name.parse()?;
    let spec = match kind {
        EnvKind::LinearUnstable => {
            let lin = LinearDynamics {
                a: dmatrix![1.1, 0.1; 0.0, 1.05],
                b: dmatrix![0.0; 0.1],
                c: Vector::zeros(2),
            };
            assert!(
                linalg::spectral_radius(&lin.a) > 1.0,
                "linear-unstable must be open-loop unstable"
            );
            EnvSpec {
                kind,
                dx: 2,
                du: 1,
                dt: 1.0,
                horizon: 50,
                u_limit: dvector![f64::INFINITY],
                x0: Gaussian::from_parts(dvector![1.0, 1.0], Mat::identity(2, 2) * 0.1),
                noise: dmatrix![0.1, 0.0; 0.0, 0.1],
                goal: Vector::zeros(2),
                cost: StageCostSpec::MinEnergy { r: dmatrix![1.0] },
                physics: Physics::Linear(lin),
            }
        }
        EnvKind::Pendulum => {
            let dt = 0.025;
            let q = dmatrix![10.0, 0.0; 0.0, 1.0];
            EnvSpec {
                kind,
                dx: 2,
                du: 1,
                dt,
                horizon: 200,
                u_limit: dvector![2.5],
                x0: Gaussian::from_parts(
                    dvector![std::f64::consts::PI, 0.0],
                    Mat::identity(2, 2) * 1e-4,
                ),
                noise: Mat::identity(2, 2) * (1e-2f64.powi(2) * dt),
                goal: Vector::zeros(2),
                cost: StageCostSpec::Quadratic {
                    q_terminal: &q * 100.0,
                    q,
                    r: dmatrix![1.0],
                },
                physics: Physics::Pendulum(PendulumParams {
                    mass: 1.0,
                    length: 1.0,
                    damping: 0.05,
                }),
            }
        }
        EnvKind::Cartpole => {
            let dt = 0.004;
            let q = Mat::from_diagonal(&dvector![10.0, 10.0, 1.0, 1.0]);
            EnvSpec {
                kind,
                dx: 4,
                du: 1,
                dt,
                horizon: 500,
                u_limit: dvector![10.0],
                x0: Gaussian::from_parts(
                    dvector![0.0, std::f64::consts::PI, 0.0, 0.0],
                    Mat::identity(4, 4) * 1e-4,
                ),
                noise: Mat::identity(4, 4) * (1e-2f64.powi(2) * dt),
                goal: Vector::zeros(4),
                cost: StageCostSpec::Quadratic {
                    q_terminal: &q * 100.0,
                    q,
                    r: dmatrix![0.1],
                },
                physics: Physics::Cartpole(CartpoleParams {
                    cart_mass: 1.0,
                    pole_mass: 0.1,
                    length: 0.5,
                }),
            }
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn pendulum_field(p: &PendulumParams, x: &Vector, u: f64) -> Vector {
    let inertia = p.mass * p.length * p.length;
    dvector![
        x[1],
        GRAVITY / p.length * x[0].sin() - p.damping / inertia * x[1] + u / inertia
    ]
}

fn pendulum_field_jac(p: &PendulumParams, x: &Vector) -> (Mat, Mat) {
    let inertia = p.mass * p.length * p.length;
    (
        dmatrix![0.0, 1.0; GRAVITY / p.length * x[0].cos(), -p.damping / inertia],
        dmatrix![0.0; 1.0 / inertia],
    )
}

/// State `(x, theta, x_dot, theta_dot)`; pole centre of mass at `length`.
fn cartpole_field(p: &CartpoleParams, s: &Vector, force: f64) -> Vector {
    let total = p.cart_mass + p.pole_mass;
    let (sin, cos) = s[1].sin_cos();
    let temp = (force + p.pole_mass * p.length * s[3] * s[3] * sin) / total;
    let theta_acc =
        (GRAVITY * sin - cos * temp) / (p.length * (4.0 / 3.0 - p.pole_mass * cos * cos / total));
    let x_acc = temp - p.pole_mass * p.length * theta_acc * cos / total;
    dvector![s[2], s[3], x_acc, theta_acc]
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.horizon == 0 {
            return Err(Error::Config(
                "dt must be positive and horizon at least 1".into(),
            ));
        }
        if self.u_limit.len() != self.du || self.u_limit.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("u_limit must be positive per input".into()));
        }
        if !linalg::is_psd(&self.noise) {
            return Err(Error::NonPsdInput);
        }
        Ok(())
    }

    pub fn clamp_input(&self, u: &Vector) -> Vector {
        u.zip_map(&self.u_limit, |v, l| v.clamp(-l, l))
    }

    fn field(&self, x: &Vector, u: &Vector) -> Vector {
        match &self.physics {
            Physics::Linear(l) => &l.a * x + &l.b * u + &l.c,
            Physics::Pendulum(p) => pendulum_field(p, x, u[0]),
            Physics::Cartpole(p) => cartpole_field(p, x, u[0]),
        }
    }

    fn field_jac(&self, x: &Vector, u: &Vector) -> (Mat, Mat) {
        match &self.physics {
            Physics::Linear(l) => (l.a.clone(), l.b.clone()),
            Physics::Pendulum(p) => pendulum_field_jac(p, x),
            Physics::Cartpole(_) => {
                let z = linalg::stack(x, u);
                let dx = self.dx;
                let j = crate::model::finite_difference(
                    &|v: &Vector| {
                        self.field(
                            &v.rows(0, dx).into_owned(),
                            &v.rows(dx, self.du).into_owned(),
                        )
                    },
                    &z,
                );
                (
                    j.columns(0, dx).into_owned(),
                    j.columns(dx, self.du).into_owned(),
                )
            }
        }
    }

    /// Deterministic one-step map with input saturation (RK4 for the
    /// continuous systems, the native map for the linear one).
    pub fn transition(&self, x: &Vector, u: &Vector) -> Vector {
        let u = self.clamp_input(u);
        match &self.physics {
            Physics::Linear(_) => self.field(x, &u),
            _ => rk4(|s| self.field(s, &u), x, self.dt),
        }
    }

    /// Jacobian of [`transition`](Self::transition) wrt `(x, u)`.
    pub fn transition_jacobian(&self, x: &Vector, u: &Vector) -> (Mat, Mat) {
        let uc = self.clamp_input(u);
        let sat =
            Mat::from_diagonal(
                &u.zip_map(&self.u_limit, |v, l| if v.abs() <= l { 1.0 } else { 0.0 }),
            );
        if let Physics::Linear(l) = &self.physics {
            return (l.a.clone(), &l.b * sat);
        }
        let h = self.dt;
        let n = self.dx;
        let k1 = self.field(x, &uc);
        let x2 = x + &k1 * (h / 2.0);
        let k2 = self.field(&x2, &uc);
        let x3 = x + &k2 * (h / 2.0);
        let k3 = self.field(&x3, &uc);
        let x4 = x + &k3 * h;

        let (a1, b1) = self.field_jac(x, &uc);
        let (a2, b2) = self.field_jac(&x2, &uc);
        let (a3, b3) = self.field_jac(&x3, &uc);
        let (a4, b4) = self.field_jac(&x4, &uc);
        let eye = Mat::identity(n, n);
        let dk1x = a1.clone();
        let dk1u = b1.clone();
        let dk2x = &a2 * (&eye + &dk1x * (h / 2.0));
        let dk2u = &a2 * &dk1u * (h / 2.0) + &b2;
        let dk3x = &a3 * (&eye + &dk2x * (h / 2.0));
        let dk3u = &a3 * &dk2u * (h / 2.0) + &b3;
        let dk4x = &a4 * (&eye + &dk3x * h);
        let dk4u = &a4 * &dk3u * h + &b4;
        let jx = &eye + (dk1x + &dk2x * 2.0 + &dk3x * 2.0 + dk4x) * (h / 6.0);
        let ju = (dk1u + &dk2u * 2.0 + &dk3u * 2.0 + dk4u) * (h / 6.0);
        (jx, ju * sat)
    }

    pub fn step(&self, x: &Vector, u: &Vector, noise: Option<&Vector>) -> Result<Vector> {
        let mut next = self.transition(x, u);
        if let Some(n) = noise {
            next += n;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { stage: 0 });
        }
        Ok(next)
    }

    /// Dynamics model of this environment. With `stochastic = false` the
    /// process noise is zero.
    pub fn dynamics(&self, stochastic: bool) -> Result<DynamicsModel> {
        let noise = if stochastic {
            self.noise.clone()
        } else {
            Mat::zeros(self.dx, self.dx)
        };
        if let Physics::Linear(l) = &self.physics {
            if self.u_limit.iter().all(|v| v.is_infinite()) {
                return DynamicsModel::linear(l.clone(), self.horizon, noise);
            }
        }
        let (env_f, env_j) = (self.clone(), self.clone());
        let map = StageMap::new(
            self.dx,
            Arc::new(move |x: &Vector, u: &Vector, _| env_f.transition(x, u)),
        )
        .with_jacobian(Arc::new(move |x: &Vector, u: &Vector, _| {
            env_j.transition_jacobian(x, u)
        }));
        DynamicsModel::new(self.dx, self.du, self.horizon, map, vec![noise])
    }

    pub fn cost(&self) -> Result<CostModel> {
        match &self.cost {
            StageCostSpec::Quadratic { q, r, q_terminal } => {
                CostModel::quadratic(q, r, Some(q_terminal), &self.goal)
            }
            StageCostSpec::MinEnergy { r } => CostModel::min_energy(r),
        }
    }

    pub fn problem(&self, stochastic: bool) -> Result<Problem> {
        Problem::new(self.dynamics(stochastic)?, self.cost()?, self.x0.clone())
    }

    /// Copy with the process noise multiplied by `scale`.
    pub fn with_noise_scale(&self, scale: f64) -> Self {
        let mut out = self.clone();
        out.noise *= scale;
        out
    }
}

pub fn rk4(f: impl Fn(&Vector) -> Vector, x: &Vector, h: f64) -> Vector {
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (h / 2.0)));
    let k3 = f(&(x + &k2 * (h / 2.0)));
    let k4 = f(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn make_env_parameters() {
        let lin = make_env("linear-unstable").unwrap();
        assert_eq!(lin.noise, dmatrix![0.1, 0.0; 0.0, 0.1]);
        assert!(
            linalg::spectral_radius(match &lin.physics {
                Physics::Linear(l) => &l.a,
                _ => unreachable!(),
            }) > 1.0
        );
        let cp = make_env("cartpole").unwrap();
        assert_eq!(cp.dt, 0.004);
        assert_eq!(cp.horizon, 500);
        let p = make_env("pendulum").unwrap();
        assert_eq!((p.dx, p.du), (2, 1));
        assert!(matches!(
            make_env("acrobot"),
            Err(Error::UnknownEnvironment(_))
        ));
    }

    #[test]
    fn linear_step_is_affine() {
        let env = make_env("linear-unstable").unwrap();
        let x = dvector![0.3, -0.7];
        let u = dvector![2.0];
        let n = dvector![0.01, -0.02];
        let out = env.step(&x, &u, Some(&n)).unwrap();
        let expect = dmatrix![1.1, 0.1; 0.0, 1.05] * &x + dmatrix![0.0; 0.1] * &u + &n;
        assert_relative_eq!(out, expect, epsilon = 1e-15);
    }

    #[test]
    fn pendulum_equilibria() {
        let env = make_env("pendulum").unwrap();
        let up = env.step(&dvector![0.0, 0.0], &dvector![0.0], None).unwrap();
        assert!(up.norm() < 1e-12);
        let mut x = dvector![std::f64::consts::PI, 0.0];
        for _ in 0..200 {
            x = env.step(&x, &dvector![0.0], None).unwrap();
        }
        assert!((x[0] - std::f64::consts::PI).abs() < 1e-12 && x[1].abs() < 1e-12);
    }

    #[test]
    fn saturation_is_exact() {
        for name in ["pendulum", "cartpole"] {
            let env = make_env(name).unwrap();
            let x = Vector::from_fn(env.dx, |i, _| 0.1 * (i as f64 + 1.0));
            let lim = env.u_limit[0];
            for u in [lim * 1.5, -lim * 3.0, 1e6] {
                let a = env.step(&x, &dvector![u], None).unwrap();
                let b = env.step(&x, &dvector![u.signum() * lim], None).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn pendulum_energy_conserved_without_damping() {
        let p = PendulumParams {
            mass: 1.0,
            length: 1.0,
            damping: 0.0,
        };
        let energy = |x: &Vector| {
            0.5 * p.mass * p.length.powi(2) * x[1] * x[1] + p.mass * GRAVITY * p.length * x[0].cos()
        };
        let h = 0.025 / 10.0;
        let mut x = dvector![2.0, 0.0];
        let e0 = energy(&x);
        // small-amplitude period bound is 2 pi sqrt(l/g); large swings are longer, use 3 s
        let steps = (3.0 / h) as usize;
        let mut worst: f64 = 0.0;
        for _ in 0..steps {
            x = rk4(|s| pendulum_field(&p, s, 0.0), &x, h);
            worst = worst.max(((energy(&x) - e0) / e0).abs());
        }
        assert!(worst < 1e-3, "relative energy drift {worst}");
    }

    #[test]
    fn rk4_jacobian_matches_finite_differences() {
        for name in ["pendulum", "cartpole"] {
            let env = make_env(name).unwrap();
            let x = Vector::from_fn(env.dx, |i, _| 0.3 - 0.2 * i as f64);
            let u = dvector![0.4];
            let (jx, ju) = env.transition_jacobian(&x, &u);
            let z = linalg::stack(&x, &u);
            let dx = env.dx;
            let jf = crate::model::finite_difference(
                &|v: &Vector| {
                    env.transition(&v.rows(0, dx).into_owned(), &v.rows(dx, 1).into_owned())
                },
                &z,
            );
            assert!((jx - jf.columns(0, dx)).abs().max() < 1e-6, "{name}");
            assert!((ju - jf.columns(dx, 1)).abs().max() < 1e-6, "{name}");
        }
    }

    #[test]
    fn non_finite_state_reported() {
        let env = make_env("linear-unstable").unwrap();
        let r = env.step(
            &dvector![f64::MAX, 0.0],
            &dvector![0.0],
            Some(&dvector![f64::MAX, 0.0]),
        );
        assert!(matches!(r, Err(Error::NonFiniteState { .. })));
    }
}
