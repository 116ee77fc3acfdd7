use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{LinearOperator, ProxFunction};
use crate::error::{check_len, invalid, Error, Result};

/// `min f(x) + g(y)  s.t.  A x + B y = b`.
///
/// A zero-dimensional `g` (with `B` of zero columns) encodes the
/// single-block problem `min f(x) s.t. A x = b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProblemRepr", into = "ProblemRepr")]
pub struct ProblemInstance {
    pub f: ProxFunction,
    pub g: ProxFunction,
    pub a: LinearOperator,
    pub b_op: LinearOperator,
    pub rhs: Array1<f64>,
}

/// A primal-dual triple together with the optimal objective value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaddlePoint {
    pub x: Array1<f64>,
    pub y: Array1<f64>,
    pub lambda: Array1<f64>,
    pub phi: f64,
}

impl ProblemInstance {
    pub fn new(
        f: ProxFunction,
        g: ProxFunction,
        a: LinearOperator,
        b_op: LinearOperator,
        rhs: Array1<f64>,
    ) -> Result<Self> {
        let m = rhs.len();
        check_len("A columns vs dim(f)", a.cols(), f.dim())?;
        check_len("B columns vs dim(g)", b_op.cols(), g.dim())?;
        check_len("A rows vs length(b)", a.rows(), m)?;
        check_len("B rows vs length(b)", b_op.rows(), m)?;
        if rhs.iter().any(|v| !v.is_finite()) {
            return invalid("right-hand side must be finite");
        }
        Ok(Self { f, g, a, b_op, rhs })
    }

    /// Single-block instance `min f(x) s.t. A x = b`.
    pub fn single_block(f: ProxFunction, a: LinearOperator, rhs: Array1<f64>) -> Result<Self> {
        let m = rhs.len();
        Self::new(f, ProxFunction::zero(0), a, LinearOperator::zero(m, 0), rhs)
    }

    pub fn nx(&self) -> usize {
        self.f.dim()
    }

    pub fn ny(&self) -> usize {
        self.g.dim()
    }

    pub fn m(&self) -> usize {
        self.rhs.len()
    }

    pub fn is_single_block(&self) -> bool {
        self.ny() == 0
    }

    pub fn mu_f(&self) -> f64 {
        self.f.strong_convexity()
    }

    pub fn mu_g(&self) -> f64 {
        self.g.strong_convexity()
    }

    pub(crate) fn check_point(&self, x: &Array1<f64>, y: &Array1<f64>) -> Result<()> {
        check_len("x", x.len(), self.nx())?;
        check_len("y", y.len(), self.ny())
    }

    pub(crate) fn check_dual(&self, lambda: &Array1<f64>) -> Result<()> {
        check_len("lambda", lambda.len(), self.m())
    }

    /// `A x + B y - b` (unchecked).
    pub fn constraint_residual(&self, x: &Array1<f64>, y: &Array1<f64>) -> Array1<f64> {
        let mut r = -&self.rhs;
        let out = r.as_slice_mut().unwrap();
        self.a.apply_add(x.as_slice().unwrap(), 1.0, out);
        self.b_op.apply_add(y.as_slice().unwrap(), 1.0, out);
        r
    }

    pub fn feasibility(&self, x: &Array1<f64>, y: &Array1<f64>) -> f64 {
        norm(&self.constraint_residual(x, y))
    }

    /// `f(x) + g(y)`.
    pub fn objective(&self, x: &Array1<f64>, y: &Array1<f64>) -> f64 {
        self.f.value(x.as_slice().unwrap()) + self.g.value(y.as_slice().unwrap())
    }

    /// `L(x, y, lambda) = f(x) + g(y) + <lambda, A x + B y - b>`.
    pub fn lagrangian_value(
        &self,
        x: &Array1<f64>,
        y: &Array1<f64>,
        lambda: &Array1<f64>,
    ) -> Result<f64> {
        self.check_point(x, y)?;
        self.check_dual(lambda)?;
        let r = self.constraint_residual(x, y);
        Ok(self.objective(x, y) + lambda.dot(&r))
    }

    /// `L(x, y, lambda) + (theta / 2) ||A x + B y - b||^2`.
    pub fn augmented_lagrangian_value(
        &self,
        x: &Array1<f64>,
        y: &Array1<f64>,
        lambda: &Array1<f64>,
        theta: f64,
    ) -> Result<f64> {
        if !(theta >= 0.0) {
            return invalid(format!("theta must be nonnegative, got {theta}"));
        }
        let base = self.lagrangian_value(x, y, lambda)?;
        let r = self.constraint_residual(x, y);
        Ok(base + 0.5 * theta * r.dot(&r))
    }

    /// Largest of the feasibility norm and the two stationarity distances
    /// `dist(-A^T lambda, df(x))`, `dist(-B^T lambda, dg(y))`.
    pub fn kkt_residual(&self, s: &SaddlePoint) -> Result<f64> {
        self.check_point(&s.x, &s.y)?;
        self.check_dual(&s.lambda)?;
        let feas = self.feasibility(&s.x, &s.y);
        let mut gx = Array1::zeros(self.nx());
        self.a
            .adjoint_add(s.lambda.as_slice().unwrap(), -1.0, gx.as_slice_mut().unwrap());
        let mut gy = Array1::zeros(self.ny());
        self.b_op
            .adjoint_add(s.lambda.as_slice().unwrap(), -1.0, gy.as_slice_mut().unwrap());
        let dx = self
            .f
            .subgradient_distance(s.x.as_slice().unwrap(), gx.as_slice().unwrap());
        let dy = self
            .g
            .subgradient_distance(s.y.as_slice().unwrap(), gy.as_slice().unwrap());
        Ok(feas.max(dx).max(dy))
    }
}

pub(crate) fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

#[derive(Serialize, Deserialize)]
struct ProblemRepr {
    f: ProxFunction,
    g: ProxFunction,
    #[serde(rename = "A")]
    a: LinearOperator,
    #[serde(rename = "B")]
    b_op: LinearOperator,
    b: Vec<f64>,
}

impl TryFrom<ProblemRepr> for ProblemInstance {
    type Error = Error;

    fn try_from(r: ProblemRepr) -> Result<Self> {
        ProblemInstance::new(r.f, r.g, r.a, r.b_op, Array1::from(r.b))
    }
}

impl From<ProblemInstance> for ProblemRepr {
    fn from(p: ProblemInstance) -> Self {
        ProblemRepr {
            f: p.f,
            g: p.g,
            a: p.a,
            b_op: p.b_op,
            b: p.rhs.to_vec(),
        }
    }
}
