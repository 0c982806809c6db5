//! Problem definition: dynamics, quadratic-residual costs, the
//! cost-to-likelihood translation and Gaussian moment transforms.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::linalg::{self, Mat, Vector};

pub type StageFn = Arc<dyn Fn(&Vector, &Vector, usize) -> Vector + Send + Sync>;
pub type StageJacobian = Arc<dyn Fn(&Vector, &Vector, usize) -> (Mat, Mat) + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
pub type TerminalJacobian = Arc<dyn Fn(&Vector) -> Mat + Send + Sync>;

/// A stagewise map `(x, u, t) -> y` with an optional analytic Jacobian.
#[derive(Clone)]
pub struct StageMap {
    f: StageFn,
    jac: Option<StageJacobian>,
    pub out_dim: usize,
}

impl fmt::Debug for StageMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StageMap")
            .field("out_dim", &self.out_dim)
            .field("analytic_jacobian", &self.jac.is_some())
            .finish()
    }
}

impl StageMap {
    pub fn new(out_dim: usize, f: StageFn) -> Self {
        Self {
            f,
            jac: None,
            out_dim,
        }
    }

    pub fn with_jacobian(mut self, jac: StageJacobian) -> Self {
        self.jac = Some(jac);
        self
    }

    /// `y = A x + B u + c`, time invariant.
    pub fn affine(a: Mat, b: Mat, c: Vector) -> Self {
        let (a2, b2) = (a.clone(), b.clone());
        let out = a.nrows();
        Self::new(out, Arc::new(move |x, u, _| &a * x + &b * u + &c))
            .with_jacobian(Arc::new(move |_, _, _| (a2.clone(), b2.clone())))
    }

    pub fn eval(&self, x: &Vector, u: &Vector, t: usize) -> Vector {
        (self.f)(x, u, t)
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jac.is_some()
    }

    /// Jacobians wrt `x` and `u`: analytic when available and requested,
    /// otherwise central differences.
    pub fn jacobian(&self, x: &Vector, u: &Vector, t: usize, source: JacobianSource) -> (Mat, Mat) {
        match (&self.jac, source) {
            (Some(j), JacobianSource::Analytic) => j(x, u, t),
            _ => {
                let z = linalg::stack(x, u);
                let dx = x.len();
                let jz = finite_difference(
                    &|v: &Vector| {
                        self.eval(
                            &v.rows(0, dx).into_owned(),
                            &v.rows(dx, v.len() - dx).into_owned(),
                            t,
                        )
                    },
                    &z,
                );
                (
                    jz.columns(0, dx).into_owned(),
                    jz.columns(dx, u.len()).into_owned(),
                )
            }
        }
    }

    /// The map as a function of the stacked vector `(x, u)`.
    pub fn joint_eval(&self, z: &Vector, dx: usize, t: usize) -> Vector {
        self.eval(
            &z.rows(0, dx).into_owned(),
            &z.rows(dx, z.len() - dx).into_owned(),
            t,
        )
    }
}

/// Central differences with step `1e-5 * max(1, |z_i|)`.
pub fn finite_difference(f: &dyn Fn(&Vector) -> Vector, z: &Vector) -> Mat {
    let y0 = f(z);
    let mut jac = Mat::zeros(y0.len(), z.len());
    for i in 0..z.len() {
        let h = 1e-5 * z[i].abs().max(1.0);
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[i] += h;
        zm[i] -= h;
        let col = (f(&zp) - f(&zm)) / (2.0 * h);
        jac.set_column(i, &col);
    }
    jac
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianSource {
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    ExactLinear,
    Taylor1,
    Cubature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentTransform {
    pub kind: TransformKind,
    #[serde(default)]
    pub jacobian: JacobianSource,
}

impl MomentTransform {
    pub const EXACT: Self = Self {
        kind: TransformKind::ExactLinear,
        jacobian: JacobianSource::Analytic,
    };
    pub const TAYLOR: Self = Self {
        kind: TransformKind::Taylor1,
        jacobian: JacobianSource::Analytic,
    };
    pub const CUBATURE: Self = Self {
        kind: TransformKind::Cubature,
        jacobian: JacobianSource::Analytic,
    };
}

/// Approximate moments of `f(input)` and the input-output cross-covariance.
///
/// `jac` is used by the linearization kinds; when absent (or when finite
/// differences are requested) the Jacobian is taken numerically.
pub fn transform_moments(
    mt: MomentTransform,
    f: &(dyn Fn(&Vector) -> Vector + Sync),
    jac: Option<&dyn Fn(&Vector) -> Mat>,
    input: &Gaussian,
) -> Result<(Gaussian, Mat)> {
    if !linalg::is_psd(&input.cov) || !input.is_finite() {
        return Err(Error::NonPsdInput);
    }
    match mt.kind {
        TransformKind::ExactLinear | TransformKind::Taylor1 => {
            let j = match (jac, mt.jacobian) {
                (Some(j), JacobianSource::Analytic) => j(&input.mean),
                _ => finite_difference(f, &input.mean),
            };
            let mean = f(&input.mean);
            let cross = &input.cov * j.transpose();
            let cov = &j * &cross;
            Ok((Gaussian::from_parts(mean, cov), cross))
        }
        TransformKind::Cubature => cubature(f, input),
    }
}

/// Sigma points `mu +/- sqrt(n) L e_i` with `L` from [`linalg::sqrt_factor`].
pub fn cubature_points(input: &Gaussian) -> Result<Vec<Vector>> {
    let n = input.dim();
    let l = linalg::sqrt_factor(&input.cov)?;
    let scale = (n as f64).sqrt();
    let mut pts = Vec::with_capacity(2 * n);
    for i in 0..n {
        let col = l.column(i) * scale;
        pts.push(&input.mean + &col);
        pts.push(&input.mean - &col);
    }
    Ok(pts)
}

fn cubature(f: &(dyn Fn(&Vector) -> Vector + Sync), input: &Gaussian) -> Result<(Gaussian, Mat)> {
    let n = input.dim();
    if n == 0 {
        let y = f(&input.mean);
        let m = y.len();
        return Ok((Gaussian::from_parts(y, Mat::zeros(m, m)), Mat::zeros(0, m)));
    }
    let pts = cubature_points(input)?;
    let exec = if pts.len() >= 64 {
        crate::par::Execution::Parallel
    } else {
        crate::par::Execution::Sequential
    };
    let ys: Vec<Vector> = crate::par::map_with(exec, &pts, |p| f(p));
    let w = 1.0 / (2 * n) as f64;
    let m = ys[0].len();
    let mut mean = Vector::zeros(m);
    for y in &ys {
        mean += y * w;
    }
    let mut cov = Mat::zeros(m, m);
    let mut cross = Mat::zeros(n, m);
    for (p, y) in pts.iter().zip(&ys) {
        let dy = y - &mean;
        let dx = p - &input.mean;
        cov += &dy * dy.transpose() * w;
        cross += &dx * dy.transpose() * w;
    }
    Ok((Gaussian::from_parts(mean, cov), cross))
}

/// Affine approximation `y ~ A z + b + e, e ~ N(0, residual)` of `f` about
/// the distribution `input`. Exact (with zero residual) for affine maps.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub jac: Mat,
    pub offset: Vector,
    pub residual: Mat,
}

pub fn linearize(
    mt: MomentTransform,
    f: &(dyn Fn(&Vector) -> Vector + Sync),
    jac: Option<&dyn Fn(&Vector) -> Mat>,
    input: &Gaussian,
) -> Result<Linearization> {
    match mt.kind {
        TransformKind::ExactLinear | TransformKind::Taylor1 => {
            let j = match (jac, mt.jacobian) {
                (Some(j), JacobianSource::Analytic) => j(&input.mean),
                _ => finite_difference(f, &input.mean),
            };
            let offset = f(&input.mean) - &j * &input.mean;
            let m = j.nrows();
            Ok(Linearization {
                jac: j,
                offset,
                residual: Mat::zeros(m, m),
            })
        }
        TransformKind::Cubature => {
            let taylor = MomentTransform {
                kind: TransformKind::Taylor1,
                jacobian: mt.jacobian,
            };
            if input.cov.trace() <= 0.0 {
                // a point mass carries no spread to regress over
                return linearize(taylor, f, jac, input);
            }
            let (out, cross) = transform_moments(mt, f, jac, input)?;
            // A = C^T S^+ on the spread directions; directions without spread
            // take the Taylor Jacobian since regression cannot see them
            let e = linalg::symmetrize(&input.cov).symmetric_eigen();
            let n = input.dim();
            let cut = 1e-12 * e.eigenvalues.iter().cloned().fold(0.0, f64::max);
            let mut pinv = Mat::zeros(n, n);
            let mut proj = Mat::zeros(n, n);
            for (i, &l) in e.eigenvalues.iter().enumerate() {
                if l > cut {
                    let v = e.eigenvectors.column(i);
                    pinv += v * v.transpose() / l;
                    proj += v * v.transpose();
                }
            }
            let mut a = cross.transpose() * &pinv;
            if proj.trace() < n as f64 - 0.5 {
                let t = linearize(taylor, f, jac, input)?;
                a += t.jac * (Mat::identity(n, n) - &proj);
            }
            let offset = &out.mean - &a * &input.mean;
            let residual = linalg::symmetrize(&(&out.cov - &a * &input.cov * a.transpose()));
            let residual = clip_psd(&residual);
            Ok(Linearization {
                jac: a,
                offset,
                residual,
            })
        }
    }
}

fn clip_psd(m: &Mat) -> Mat {
    if m.nrows() == 0 {
        return m.clone();
    }
    let e = m.clone().symmetric_eigen();
    let d = Mat::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0)));
    linalg::symmetrize(&(&e.eigenvectors * d * e.eigenvectors.transpose()))
}

/// Time-invariant affine dynamics `x' = A x + B u + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDynamics {
    pub a: Mat,
    pub b: Mat,
    pub c: Vector,
}

#[derive(Debug, Clone)]
pub struct DynamicsModel {
    pub dx: usize,
    pub du: usize,
    pub horizon: usize,
    pub map: StageMap,
    noise: Vec<Mat>,
    pub linear: Option<LinearDynamics>,
}

impl DynamicsModel {
    /// `noise` holds one covariance (time invariant) or one per stage.
    pub fn new(
        dx: usize,
        du: usize,
        horizon: usize,
        map: StageMap,
        noise: Vec<Mat>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if map.out_dim != dx {
            return Err(Error::ShapeMismatch(format!(
                "dynamics output {} != dx {}",
                map.out_dim, dx
            )));
        }
        if noise.is_empty() || !(noise.len() == 1 || noise.len() == horizon) {
            return Err(Error::ShapeMismatch(
                "noise must have 1 or T entries".into(),
            ));
        }
        for n in &noise {
            if n.nrows() != dx || n.ncols() != dx {
                return Err(Error::ShapeMismatch(
                    "noise covariance must be dx x dx".into(),
                ));
            }
            if !linalg::is_psd(n) {
                return Err(Error::NonPsdInput);
            }
        }
        Ok(Self {
            dx,
            du,
            horizon,
            map,
            noise,
            linear: None,
        })
    }

    pub fn linear(lin: LinearDynamics, horizon: usize, noise: Mat) -> Result<Self> {
        let (dx, du) = (lin.a.nrows(), lin.b.ncols());
        if lin.a.ncols() != dx || lin.b.nrows() != dx || lin.c.len() != dx {
            return Err(Error::ShapeMismatch("inconsistent linear dynamics".into()));
        }
        let map = StageMap::affine(lin.a.clone(), lin.b.clone(), lin.c.clone());
        let mut m = Self::new(dx, du, horizon, map, vec![noise])?;
        m.linear = Some(lin);
        Ok(m)
    }

    pub fn noise_cov(&self, t: usize) -> &Mat {
        &self.noise[t.min(self.noise.len() - 1)]
    }

    /// Copy with every stage noise replaced by `noise`.
    pub fn with_noise(&self, noise: Mat) -> Result<Self> {
        let mut m = Self::new(
            self.dx,
            self.du,
            self.horizon,
            self.map.clone(),
            vec![noise],
        )?;
        m.linear = self.linear.clone();
        Ok(m)
    }

    pub fn step_mean(&self, x: &Vector, u: &Vector, t: usize) -> Vector {
        self.map.eval(x, u, t)
    }

    pub fn is_linear(&self) -> bool {
        self.linear.is_some()
    }
}

/// Terminal residual `g_T(x) - z_T` weighted by `W_T`.
#[derive(Clone)]
pub struct TerminalCost {
    pub g: TerminalFn,
    pub jac: Option<TerminalJacobian>,
    pub target: Vector,
    pub weight: Mat,
}

impl fmt::Debug for TerminalCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalCost")
            .field("target", &self.target)
            .field("weight", &self.weight)
            .finish()
    }
}

impl TerminalCost {
    pub fn jacobian(&self, x: &Vector, source: JacobianSource) -> Mat {
        match (&self.jac, source) {
            (Some(j), JacobianSource::Analytic) => j(x),
            _ => finite_difference(&|v: &Vector| (self.g)(v), x),
        }
    }
}

/// Stage cost `r^T W r` with `r = g_t(x, u) - z_t`, plus an optional terminal term.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub g: StageMap,
    targets: Vec<Vector>,
    weights: Vec<Mat>,
    pub terminal: Option<TerminalCost>,
}

fn check_weight(w: &Mat) -> Result<()> {
    if w.nrows() != w.ncols() {
        return Err(Error::ShapeMismatch("weight must be square".into()));
    }
    if !linalg::is_psd(w) {
        return Err(Error::NonPsdInput);
    }
    if w.nrows() > 0 && linalg::min_eigenvalue(w) <= 0.0 {
        return Err(Error::Config(
            "cost weights must be positive definite; drop unpenalized dims from g".into(),
        ));
    }
    Ok(())
}

impl CostModel {
    pub fn new(
        g: StageMap,
        targets: Vec<Vector>,
        weights: Vec<Mat>,
        terminal: Option<TerminalCost>,
    ) -> Result<Self> {
        if targets.is_empty() || weights.is_empty() {
            return Err(Error::ShapeMismatch(
                "cost needs at least one target and weight".into(),
            ));
        }
        for (i, w) in weights.iter().enumerate() {
            check_weight(w)?;
            let z = &targets[i.min(targets.len() - 1)];
            if w.nrows() != g.out_dim || z.len() != g.out_dim {
                return Err(Error::ShapeMismatch(
                    "target/weight dims must match g".into(),
                ));
            }
        }
        if let Some(term) = &terminal {
            check_weight(&term.weight)?;
            if term.weight.nrows() != term.target.len() {
                return Err(Error::ShapeMismatch("terminal target/weight dims".into()));
            }
        }
        Ok(Self {
            g,
            targets,
            weights,
            terminal,
        })
    }

    /// `g = (x, u)`, `z = (x_goal, 0)`, `W = diag(Q, R)`, terminal `x` against `Q_T`.
    pub fn quadratic(q: &Mat, r: &Mat, q_terminal: Option<&Mat>, goal: &Vector) -> Result<Self> {
        let (dx, du) = (q.nrows(), r.nrows());
        let g = StageMap::new(
            dx + du,
            Arc::new(|x: &Vector, u: &Vector, _| linalg::stack(x, u)),
        )
        .with_jacobian(Arc::new(move |_, _, _| {
            let mut h = Mat::zeros(dx + du, dx);
            h.view_mut((0, 0), (dx, dx)).fill_with_identity();
            let mut d = Mat::zeros(dx + du, du);
            d.view_mut((dx, 0), (du, du)).fill_with_identity();
            (h, d)
        }));
        let z = linalg::stack(goal, &Vector::zeros(du));
        let terminal = q_terminal.map(|qt| TerminalCost {
            g: Arc::new(|x: &Vector| x.clone()),
            jac: Some(Arc::new(move |_: &Vector| Mat::identity(dx, dx))),
            target: goal.clone(),
            weight: qt.clone(),
        });
        Self::new(g, vec![z], vec![linalg::block_diag(q, r)], terminal)
    }

    /// Minimum-energy cost `u^T R u` with no terminal term.
    pub fn min_energy(r: &Mat) -> Result<Self> {
        let du = r.nrows();
        let g = StageMap::new(du, Arc::new(|_: &Vector, u: &Vector, _| u.clone()));
        let g = g.with_jacobian(Arc::new(move |x: &Vector, _, _| {
            (Mat::zeros(du, x.len()), Mat::identity(du, du))
        }));
        Self::new(g, vec![Vector::zeros(du)], vec![r.clone()], None)
    }

    pub fn target(&self, t: usize) -> &Vector {
        &self.targets[t.min(self.targets.len() - 1)]
    }

    pub fn weight(&self, t: usize) -> &Mat {
        &self.weights[t.min(self.weights.len() - 1)]
    }

    pub fn stage_dim(&self) -> usize {
        self.g.out_dim
    }

    /// Same structure with every weight (stage and terminal) multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w *= c);
        if let Some(t) = out.terminal.as_mut() {
            t.weight *= c;
        }
        Ok(out)
    }

    pub fn stage_cost(&self, x: &Vector, u: &Vector, t: usize) -> f64 {
        let r = self.g.eval(x, u, t) - self.target(t);
        r.dot(&(self.weight(t) * &r))
    }

    pub fn terminal_cost(&self, x: &Vector) -> f64 {
        match &self.terminal {
            Some(term) => {
                let r = (term.g)(x) - &term.target;
                r.dot(&(&term.weight * &r))
            }
            None => 0.0,
        }
    }
}

/// Observation noise covariances `(alpha W_t)^-1` per stage (and terminal).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationNoise {
    pub stages: Vec<Mat>,
    pub terminal: Option<Mat>,
}

pub fn cost_to_likelihood(
    cost: &CostModel,
    alpha: f64,
    horizon: usize,
) -> Result<ObservationNoise> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::NonPositiveAlpha(alpha));
    }
    let stages = (0..horizon)
        .map(|t| linalg::spd_inverse(&(cost.weight(t) * alpha)))
        .collect::<Result<Vec<_>>>()?;
    let terminal = match &cost.terminal {
        Some(term) => Some(linalg::spd_inverse(&(&term.weight * alpha))?),
        None => None,
    };
    Ok(ObservationNoise { stages, terminal })
}

/// Total cost of a state-action trajectory (`T+1` states, `T` inputs).
pub fn evaluate_cost(cost: &CostModel, states: &[Vector], inputs: &[Vector]) -> Result<f64> {
    if states.len() != inputs.len() + 1 {
        return Err(Error::LengthMismatch(format!(
            "{} states for {} inputs",
            states.len(),
            inputs.len()
        )));
    }
    let stage: f64 = inputs
        .iter()
        .enumerate()
        .map(|(t, u)| cost.stage_cost(&states[t], u, t))
        .sum();
    Ok(stage + cost.terminal_cost(&states[inputs.len()]))
}

/// Taylor expansion of dynamics and cost residual about `(x, u)`.
#[derive(Debug, Clone)]
pub struct LocalLinearModel {
    pub a: Mat,
    pub b: Mat,
    pub c: Vector,
    pub h: Mat,
    pub d: Mat,
    pub e: Vector,
}

pub fn local_linear_model(
    dynamics: &DynamicsModel,
    cost: &CostModel,
    x: &Vector,
    u: &Vector,
    t: usize,
    source: JacobianSource,
) -> LocalLinearModel {
    let (a, b) = dynamics.map.jacobian(x, u, t, source);
    let c = dynamics.map.eval(x, u, t) - &a * x - &b * u;
    let (h, d) = cost.g.jacobian(x, u, t, source);
    let e = cost.g.eval(x, u, t) - &h * x - &d * u;
    LocalLinearModel { a, b, c, h, d, e }
}

/// A complete finite-horizon problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub dynamics: DynamicsModel,
    pub cost: CostModel,
    pub x0: Gaussian,
}

impl Problem {
    pub fn new(dynamics: DynamicsModel, cost: CostModel, x0: Gaussian) -> Result<Self> {
        if x0.dim() != dynamics.dx {
            return Err(Error::ShapeMismatch("initial state dim".into()));
        }
        Ok(Self { dynamics, cost, x0 })
    }

    pub fn horizon(&self) -> usize {
        self.dynamics.horizon
    }

    /// Deterministic rollout of an open-loop input sequence from `x0`.
    pub fn rollout(&self, x0: &Vector, inputs: &[Vector]) -> Vec<Vector> {
        let mut xs = Vec::with_capacity(inputs.len() + 1);
        xs.push(x0.clone());
        for (t, u) in inputs.iter().enumerate() {
            let next = self.dynamics.step_mean(&xs[t], u, t);
            xs.push(next);
        }
        xs
    }
}
