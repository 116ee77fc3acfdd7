//! Problem data: proximable functions, linear operators, instances and saddle points.

mod operator;
mod problem;
mod prox;

pub use operator::{LinearOperator, OperatorKind};
pub use problem::{ProblemInstance, SaddlePoint};
pub(crate) use problem::norm;
pub use prox::{ProxFunction, ProxKind, ScalarPiece};
