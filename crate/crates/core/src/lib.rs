//! Accelerated primal-dual splitting for linearly constrained two-block problems.

pub mod baselines;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod model;
pub mod schedules;
pub mod solvers;
pub mod subproblem;

pub use error::{Error, Result};
pub use model::{LinearOperator, OperatorKind, ProblemInstance, ProxFunction, ProxKind, SaddlePoint};
