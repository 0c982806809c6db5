//! Stochastic optimal control by approximate Gaussian input inference.
//!
//! The solver in [`i2c`] frames finite-horizon control as smoothing in a
//! state-action latent model and alternates Gaussian smoothing with a
//! closed-form update of the cost-to-likelihood scale. [`baselines`] holds
//! the LQR, risk-sensitive LEQG and iLQR reference solvers, [`covcontrol`]
//! steers terminal state distributions, and [`bench`] runs seeded rollout
//! benchmarks.

pub mod baselines;
pub mod bench;
pub mod covcontrol;
pub mod envs;
pub mod error;
pub mod gaussian;
pub mod i2c;
pub mod linalg;
pub mod model;
pub mod par;

pub use error::{Error, Result};
pub use gaussian::{Gaussian, JointGaussian};
