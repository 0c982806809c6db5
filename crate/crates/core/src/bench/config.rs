//! Run configuration, read from TOML. Command-line flags override the file,
//! and the file overrides the defaults below.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::rollout::ExecutionMode;
use crate::covcontrol::AnnealSchedule;
use crate::error::{Error, Result};
use crate::i2c::{ControllerMode, I2cConfig, InferenceMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    I2c,
    Lqr,
    Leqg,
    Ilqr,
    Cc,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::I2c => "i2c",
            SolverKind::Lqr => "lqr",
            SolverKind::Leqg => "leqg",
            SolverKind::Ilqr => "ilqr",
            SolverKind::Cc => "cc",
        }
    }
}

impl FromStr for SolverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i2c" => Ok(SolverKind::I2c),
            "lqr" => Ok(SolverKind::Lqr),
            "leqg" => Ok(SolverKind::Leqg),
            "ilqr" => Ok(SolverKind::Ilqr),
            "cc" => Ok(SolverKind::Cc),
            other => Err(Error::Config(format!("unknown solver `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Config(format!("unknown output format `{other}`"))),
        }
    }
}

/// Per-environment overrides applied on top of the built-in definitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvOverrides {
    pub horizon: Option<usize>,
    /// Multiplies the process-noise covariance.
    pub noise_scale: f64,
}

impl Default for EnvOverrides {
    fn default() -> Self {
        EnvOverrides {
            horizon: None,
            noise_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlqrSettings {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for IlqrSettings {
    fn default() -> Self {
        IlqrSettings {
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcSettings {
    pub target_mean: Vec<f64>,
    /// Row-major covariance of the target.
    pub target_cov: Vec<f64>,
    pub schedule: AnnealSchedule,
    pub tol_kl: f64,
}

impl Default for CcSettings {
    fn default() -> Self {
        CcSettings {
            target_mean: vec![],
            target_cov: vec![],
            schedule: AnnealSchedule::default(),
            tol_kl: 1e-6,
        }
    }
}

/// One column of a benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub solver: SolverKind,
    #[serde(default)]
    pub mode: Option<InferenceMode>,
    #[serde(default)]
    pub controller: Option<ControllerMode>,
}

impl Variant {
    /// Column label, e.g. `i2c(CE,E)` or `ilqr`.
    pub fn label(&self, base: &I2cConfig) -> String {
        match self.solver {
            SolverKind::I2c => {
                let mode = match self.mode.unwrap_or(base.mode) {
                    InferenceMode::Stochastic => "S",
                    InferenceMode::CertaintyEquivalent => "CE",
                };
                let ctrl = match self.controller.unwrap_or(base.controller_mode) {
                    ControllerMode::Ff => "FF",
                    ControllerMode::Fb => "FB",
                    ControllerMode::Expert => "E",
                };
                format!("i2c({mode},{ctrl})")
            }
            other => other.name().to_string(),
        }
    }

    /// The i2c settings with this variant's mode and controller applied.
    pub fn i2c_config(&self, base: &I2cConfig) -> I2cConfig {
        let mut cfg = base.clone();
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(c) = self.controller {
            cfg.controller_mode = c;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: String,
    /// Environments for `bench`; empty means `[env]`.
    pub envs: Vec<String>,
    pub overrides: EnvOverrides,
    pub solver: SolverKind,
    /// Risk parameter for `leqg`.
    pub sigma: f64,
    pub rollouts: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub formats: Vec<OutputFormat>,
    /// Sample the controller's action covariance during rollouts.
    pub sample_actions: bool,
    pub keep_trajectories: bool,
    pub execution: ExecutionMode,
    /// Multiplier applied to reported costs (1e-3 mirrors thousands).
    pub cost_scale: f64,
    pub i2c: I2cConfig,
    pub ilqr: IlqrSettings,
    pub cc: CcSettings,
    /// Benchmark columns; empty means a single column for `solver`.
    pub variants: Vec<Variant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: "pendulum".into(),
            envs: vec![],
            overrides: EnvOverrides::default(),
            solver: SolverKind::I2c,
            sigma: 0.0,
            rollouts: 100,
            seed: 0,
            out: PathBuf::from("out"),
            formats: vec![OutputFormat::Csv, OutputFormat::Json],
            sample_actions: false,
            keep_trajectories: false,
            execution: ExecutionMode::Parallel,
            cost_scale: 1.0,
            i2c: I2cConfig::default(),
            ilqr: IlqrSettings::default(),
            cc: CcSettings::default(),
            variants: vec![],
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical TOML of the effective configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rollouts == 0 {
            return Err(Error::Config("rollouts must be at least 1".into()));
        }
        if self.formats.is_empty() {
            return Err(Error::Config(
                "at least one output format is required".into(),
            ));
        }
        if !(self.overrides.noise_scale >= 0.0 && self.overrides.noise_scale.is_finite()) {
            return Err(Error::Config(
                "noise_scale must be finite and non-negative".into(),
            ));
        }
        if self.overrides.horizon == Some(0) {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.cost_scale > 0.0 && self.cost_scale.is_finite()) {
            return Err(Error::Config("cost_scale must be positive".into()));
        }
        if !self.sigma.is_finite() {
            return Err(Error::Config("sigma must be finite".into()));
        }
        self.i2c.validate()?;
        self.cc.schedule.validate()?;
        for name in self.env_names() {
            name.parse::<crate::envs::EnvKind>()?;
        }
        Ok(())
    }

    pub fn env_names(&self) -> Vec<String> {
        if self.envs.is_empty() {
            vec![self.env.clone()]
        } else {
            self.envs.clone()
        }
    }

    pub fn variant_list(&self) -> Vec<Variant> {
        if self.variants.is_empty() {
            vec![Variant {
                solver: self.solver,
                mode: None,
                controller: None,
            }]
        } else {
            self.variants.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_nested_sections() {
        let cfg = RunConfig::from_toml(
            r#"
            env = "linear-unstable"
            solver = "cc"
            rollouts = 10
            seed = 42
            formats = ["json"]

            [overrides]
            noise_scale = 0.5

            [i2c]
            mode = "ce"
            alpha0 = 2.0

            [cc]
            target_mean = [0.0, 0.0]
            target_cov = [0.5, 0.0, 0.0, 0.5]
            schedule = { decay = 0.5 }

            [[variants]]
            solver = "i2c"
            controller = "expert"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.solver, SolverKind::Cc);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.formats, vec![OutputFormat::Json]);
        assert_eq!(cfg.overrides.noise_scale, 0.5);
        assert_eq!(cfg.i2c.mode, InferenceMode::CertaintyEquivalent);
        assert_eq!(cfg.cc.schedule.decay, 0.5);
        assert_eq!(cfg.cc.schedule.max_iters, 60);
        assert_eq!(cfg.variants[0].label(&cfg.i2c), "i2c(CE,E)");

        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("rollouts = 0").is_err());
        assert!(RunConfig::from_toml("env = \"acrobot\"").is_err());
        assert!(RunConfig::from_toml("unknown_key = 1").is_err());
        assert!(RunConfig::from_toml("solver = \"ppo\"").is_err());
        assert!(RunConfig::from_toml("[i2c]\nalpha0 = -1.0").is_err());
    }
}
