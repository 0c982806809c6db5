//! Reference solvers: time-varying LQR, risk-sensitive LEQG and iLQR.

pub mod ilqr;
pub mod lqr;

pub use ilqr::{cost_gradient, ilqr_solve, IlqrOptions, IlqrResult};
pub use lqr::{
    leqg_solve, lqr_solve, AffinePolicy, LinearStage, LqProblem, QuadraticStage, ValueQuadratic,
};
