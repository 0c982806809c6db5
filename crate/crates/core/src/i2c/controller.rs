//! Time-varying linear-Gaussian controllers extracted from a posterior.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{chi2_quantile, membership_weight_with_quantile, Gaussian};
use crate::i2c::{ControllerMode, Posterior};
use crate::linalg::{self, Mat, Vector};

/// Per-stage policy `u ~ N(K x + k, Sigma_u)` plus the nominal state belief
/// used by the expert gate. In FF mode the gains are zero and `k`, `Sigma_u`
/// are the marginal input moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianController {
    pub mode: ControllerMode,
    pub expert_p: f64,
    pub gains: Vec<Mat>,
    pub offsets: Vec<Vector>,
    pub action_cov: Vec<Mat>,
    /// Marginal input moments (the open-loop fallback of the expert).
    pub input_mean: Vec<Vector>,
    pub input_cov: Vec<Mat>,
    pub state_mean: Vec<Vector>,
    pub state_cov: Vec<Mat>,
    quantile: f64,
}

pub fn extract_controller(
    post: &Posterior,
    mode: ControllerMode,
    expert_p: f64,
) -> Result<LinearGaussianController> {
    let quantile = chi2_quantile(post.terminal.dim().max(1), expert_p)?;
    let horizon = post.horizon();
    let mut ctrl = LinearGaussianController {
        mode,
        expert_p,
        gains: Vec::with_capacity(horizon),
        offsets: Vec::with_capacity(horizon),
        action_cov: Vec::with_capacity(horizon),
        input_mean: Vec::with_capacity(horizon),
        input_cov: Vec::with_capacity(horizon),
        state_mean: Vec::with_capacity(horizon),
        state_cov: Vec::with_capacity(horizon),
        quantile,
    };
    for joint in &post.stages {
        let x = joint.marginal(0)?;
        let u = joint.marginal(1)?;
        let sux = joint.cross(1, 0)?;
        let (gain, offset, cov) = match mode {
            ControllerMode::Ff => (Mat::zeros(u.dim(), x.dim()), u.mean.clone(), u.cov.clone()),
            ControllerMode::Fb | ControllerMode::Expert => {
                // K = Sigma_ux Sigma_xx^-1; a degenerate state belief gives no
                // feedback along the directions it does not spread over
                let gain = match linalg::spd_solve(&x.cov, &sux.transpose()) {
                    Ok(s) => s.transpose(),
                    Err(_) => &sux * linalg::psd_pinv(&x.cov),
                };
                let offset = &u.mean - &gain * &x.mean;
                let cov = linalg::symmetrize(&(&u.cov - &gain * sux.transpose()));
                (gain, offset, clip_psd(&cov))
            }
        };
        ctrl.gains.push(gain);
        ctrl.offsets.push(offset);
        ctrl.action_cov.push(cov);
        ctrl.input_mean.push(u.mean);
        ctrl.input_cov.push(u.cov);
        ctrl.state_mean.push(x.mean);
        ctrl.state_cov.push(x.cov);
    }
    Ok(ctrl)
}

fn clip_psd(m: &Mat) -> Mat {
    if linalg::min_eigenvalue(m) >= 0.0 {
        return m.clone();
    }
    let e = m.clone().symmetric_eigen();
    let d = Mat::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0)));
    linalg::symmetrize(&(&e.eigenvectors * d * e.eigenvectors.transpose()))
}

impl LinearGaussianController {
    /// Feedback-mode controller from explicit gains, offsets and action
    /// covariances. The nominal beliefs are filled with placeholders since
    /// only the expert gate reads them.
    pub fn feedback(gains: Vec<Mat>, offsets: Vec<Vector>, action_cov: Vec<Mat>) -> Result<Self> {
        let horizon = gains.len();
        if offsets.len() != horizon || action_cov.len() != horizon {
            return Err(Error::LengthMismatch(format!(
                "{horizon} gains, {} offsets, {} action covariances",
                offsets.len(),
                action_cov.len()
            )));
        }
        for t in 0..horizon {
            let du = gains[t].nrows();
            if offsets[t].len() != du || action_cov[t].shape() != (du, du) {
                return Err(Error::ShapeMismatch(format!("controller stage {t}")));
            }
            if !linalg::is_psd(&action_cov[t]) {
                return Err(Error::NonPsdInput);
            }
        }
        let dx = gains.first().map_or(0, |k| k.ncols());
        Ok(LinearGaussianController {
            mode: ControllerMode::Fb,
            expert_p: 0.95,
            state_mean: vec![Vector::zeros(dx); horizon],
            state_cov: vec![Mat::identity(dx, dx); horizon],
            input_mean: offsets.clone(),
            input_cov: action_cov.clone(),
            quantile: chi2_quantile(dx.max(1), 0.95)?,
            gains,
            offsets,
            action_cov,
        })
    }

    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    fn check_stage(&self, t: usize) -> Result<()> {
        if t >= self.horizon() {
            return Err(Error::StageOutOfRange {
                stage: t,
                horizon: self.horizon(),
            });
        }
        Ok(())
    }

    /// Expert gate: confidence-region weight of `x` under the nominal state
    /// belief. 1 in FB mode, 0 in FF mode.
    pub fn weight(&self, t: usize, x: &Vector) -> Result<f64> {
        self.check_stage(t)?;
        match self.mode {
            ControllerMode::Fb => Ok(1.0),
            ControllerMode::Ff => Ok(0.0),
            ControllerMode::Expert => {
                let g = Gaussian::from_parts(self.state_mean[t].clone(), self.state_cov[t].clone());
                membership_weight_with_quantile(&g, x, self.quantile)
            }
        }
    }

    /// Mean action and action covariance at `(t, x)`.
    pub fn action_distribution(&self, t: usize, x: &Vector) -> Result<(Vector, Mat)> {
        self.check_stage(t)?;
        if x.len() != self.state_mean[t].len() {
            return Err(Error::ShapeMismatch(format!(
                "state dim {} != {}",
                x.len(),
                self.state_mean[t].len()
            )));
        }
        let fb = &self.gains[t] * x + &self.offsets[t];
        match self.mode {
            ControllerMode::Fb | ControllerMode::Ff => Ok((fb, self.action_cov[t].clone())),
            ControllerMode::Expert => {
                let w = self.weight(t, x)?;
                let mean = fb * w + &self.input_mean[t] * (1.0 - w);
                let cov = &self.action_cov[t] * w + &self.input_cov[t] * (1.0 - w);
                Ok((mean, cov))
            }
        }
    }

    /// Action at `(t, x)`. With `sample` the action covariance is sampled
    /// with a generator seeded by `seed`, so the call is deterministic.
    pub fn control(&self, t: usize, x: &Vector, sample: bool, seed: u64) -> Result<Vector> {
        let (mean, cov) = self.action_distribution(t, x)?;
        if !sample {
            return Ok(mean);
        }
        let l = linalg::sqrt_factor(&cov)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Vector::from_fn(mean.len(), |_, _| StandardNormal.sample(&mut rng));
        Ok(mean + l * z)
    }

    /// Plain-text dump for replay. Layout (one token list per line):
    ///
    /// ```text
    /// # i2c linear-gaussian controller
    /// # fields per stage: K (row-major), k, Sigma_u (row-major), mu_u, Sigma_uu (row-major), mu_x, Sigma_x (row-major)
    /// mode <ff|fb|expert>
    /// expert_p <p>
    /// dims <dx> <du> <T>
    /// stage <t>
    /// K ...
    /// k ...
    /// Sigma_u ...
    /// mu_u ...
    /// Sigma_uu ...
    /// mu_x ...
    /// Sigma_x ...
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# i2c linear-gaussian controller\n");
        s.push_str("# fields per stage: K (row-major), k, Sigma_u (row-major), mu_u, Sigma_uu (row-major), mu_x, Sigma_x (row-major)\n");
        let _ = writeln!(s, "mode {}", self.mode.name());
        let _ = writeln!(s, "expert_p {}", self.expert_p);
        let (dx, du) = (
            self.state_mean.first().map_or(0, |v| v.len()),
            self.offsets.first().map_or(0, |v| v.len()),
        );
        let _ = writeln!(s, "dims {} {} {}", dx, du, self.horizon());
        for t in 0..self.horizon() {
            let _ = writeln!(s, "stage {t}");
            line(&mut s, "K", &row_major(&self.gains[t]));
            line(&mut s, "k", self.offsets[t].as_slice());
            line(&mut s, "Sigma_u", &row_major(&self.action_cov[t]));
            line(&mut s, "mu_u", self.input_mean[t].as_slice());
            line(&mut s, "Sigma_uu", &row_major(&self.input_cov[t]));
            line(&mut s, "mu_x", self.state_mean[t].as_slice());
            line(&mut s, "Sigma_x", &row_major(&self.state_cov[t]));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("controller text: {m}"));
        let mut lines = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let mut field = |name: &str| -> Result<Vec<String>> {
            let l = lines
                .next()
                .ok_or_else(|| bad(&format!("missing {name}")))?;
            let mut parts = l.split_whitespace();
            if parts.next() != Some(name) {
                return Err(bad(&format!("expected {name}")));
            }
            Ok(parts.map(str::to_owned).collect())
        };
        let mode: ControllerMode = field("mode")?.first().ok_or_else(|| bad("mode"))?.parse()?;
        let expert_p: f64 = num(&field("expert_p")?, 1)?[0];
        let dims = num(&field("dims")?, 3)?;
        let (dx, du, horizon) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
        let mut ctrl = LinearGaussianController {
            mode,
            expert_p,
            gains: vec![],
            offsets: vec![],
            action_cov: vec![],
            input_mean: vec![],
            input_cov: vec![],
            state_mean: vec![],
            state_cov: vec![],
            quantile: chi2_quantile(dx.max(1), expert_p)?,
        };
        for _ in 0..horizon {
            field("stage")?;
            ctrl.gains
                .push(Mat::from_row_slice(du, dx, &num(&field("K")?, du * dx)?));
            ctrl.offsets.push(Vector::from_vec(num(&field("k")?, du)?));
            ctrl.action_cov.push(Mat::from_row_slice(
                du,
                du,
                &num(&field("Sigma_u")?, du * du)?,
            ));
            ctrl.input_mean
                .push(Vector::from_vec(num(&field("mu_u")?, du)?));
            ctrl.input_cov.push(Mat::from_row_slice(
                du,
                du,
                &num(&field("Sigma_uu")?, du * du)?,
            ));
            ctrl.state_mean
                .push(Vector::from_vec(num(&field("mu_x")?, dx)?));
            ctrl.state_cov.push(Mat::from_row_slice(
                dx,
                dx,
                &num(&field("Sigma_x")?, dx * dx)?,
            ));
        }
        Ok(ctrl)
    }
}

fn row_major(m: &Mat) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn line(s: &mut String, name: &str, vals: &[f64]) {
    s.push_str(name);
    for v in vals {
        // shortest round-trip representation
        let _ = write!(s, " {v:?}");
    }
    s.push('\n');
}

fn num(tokens: &[String], n: usize) -> Result<Vec<f64>> {
    if tokens.len() != n {
        return Err(Error::Config(format!(
            "controller text: expected {n} numbers, got {}",
            tokens.len()
        )));
    }
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::Config(format!("controller text: {e}")))
        })
        .collect()
}
