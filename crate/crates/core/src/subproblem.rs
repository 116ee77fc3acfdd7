//! Per-iteration subproblems `min h(u) + 1/2 <u, Q u> - <c, u>`, where `h` is a
//! blockwise sum of proximable functions and `Q = sum sigma_i G_i^T G_i + diag(shift)`.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::model::{LinearOperator, ProblemInstance, ProxFunction, ScalarPiece};
use crate::schedules::StepCoefficients;

/// `sigma * G^T G` with `G = [G_1 ... G_n]` split along the blocks; `None` is a zero block.
#[derive(Clone, Debug)]
pub struct QuadTerm<'a> {
    pub sigma: f64,
    pub ops: Vec<Option<&'a LinearOperator>>,
}

#[derive(Clone, Debug)]
pub struct CompositeQuadratic<'a> {
    pub blocks: Vec<&'a ProxFunction>,
    pub quad_terms: Vec<QuadTerm<'a>>,
    /// One nonnegative shift per block.
    pub diag_shift: Vec<f64>,
    pub linear: Array1<f64>,
    lipschitz: f64,
    offsets: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolvePath {
    /// `Q` folds to a diagonal; coordinatewise prox.
    Diagonal,
    /// Two equally sized blocks coupled coordinatewise; exact 2x2 solves.
    Paired,
    /// Accelerated proximal gradient.
    General,
}

#[derive(Clone, Debug)]
pub struct InnerSolution {
    pub u: Array1<f64>,
    /// Prox-gradient mapping norm `L ||u - T(u)||` at `u`; zero on the exact paths.
    pub residual: f64,
    pub iterations: usize,
    pub path: SolvePath,
    pub converged: bool,
}

impl<'a> CompositeQuadratic<'a> {
    pub fn new(
        blocks: Vec<&'a ProxFunction>,
        quad_terms: Vec<QuadTerm<'a>>,
        diag_shift: Vec<f64>,
        linear: Array1<f64>,
    ) -> Result<Self> {
        check_len("diag_shift", diag_shift.len(), blocks.len())?;
        let mut offsets = vec![0];
        for b in &blocks {
            offsets.push(offsets.last().unwrap() + b.dim());
        }
        check_len("linear term", linear.len(), *offsets.last().unwrap())?;
        if diag_shift.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return invalid("diagonal shifts must be finite and nonnegative");
        }
        if linear.iter().any(|v| !v.is_finite()) {
            return invalid("linear term must be finite");
        }
        let mut lipschitz = diag_shift.iter().cloned().fold(0.0, f64::max);
        for t in &quad_terms {
            check_len("quadratic term blocks", t.ops.len(), blocks.len())?;
            if !(t.sigma >= 0.0 && t.sigma.is_finite()) {
                return invalid(format!("quadratic coefficient must be nonnegative, got {}", t.sigma));
            }
            let mut rows = None;
            let mut sq = 0.0;
            for (op, b) in t.ops.iter().zip(&blocks) {
                if let Some(op) = op {
                    check_len("operator columns", op.cols(), b.dim())?;
                    if let Some(r) = rows {
                        check_len("operator rows", op.rows(), r)?;
                    }
                    rows = Some(op.rows());
                    let n = op.operator_norm();
                    sq += n * n;
                }
            }
            lipschitz += t.sigma * sq;
        }
        Ok(Self { blocks, quad_terms, diag_shift, linear, lipschitz, offsets })
    }

    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Upper bound on the largest eigenvalue of `Q`.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    /// `out = Q u`.
    pub fn apply_q(&self, u: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
        for (b, &s) in self.diag_shift.iter().enumerate() {
            let r = self.block_range(b);
            for (o, &v) in out[r.clone()].iter_mut().zip(&u[r]) {
                *o = s * v;
            }
        }
        for t in &self.quad_terms {
            let Some(rows) = t.ops.iter().flatten().map(|op| op.rows()).next() else {
                continue;
            };
            scratch.clear();
            scratch.resize(rows, 0.0);
            for (b, op) in t.ops.iter().enumerate() {
                if let Some(op) = op {
                    op.apply_add(&u[self.block_range(b)], 1.0, scratch);
                }
            }
            for (b, op) in t.ops.iter().enumerate() {
                if let Some(op) = op {
                    let r = self.block_range(b);
                    op.adjoint_add(scratch, t.sigma, &mut out[r]);
                }
            }
        }
    }

    pub fn q_times(&self, u: &Array1<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim());
        let mut scratch = Vec::new();
        self.apply_q(u.as_slice().unwrap(), out.as_slice_mut().unwrap(), &mut scratch);
        out
    }

    fn prox_value(&self, u: &[f64]) -> f64 {
        self.blocks
            .iter()
            .enumerate()
            .map(|(b, f)| f.value(&u[self.block_range(b)]))
            .sum()
    }

    fn objective_with(&self, u: &[f64], qu: &[f64]) -> f64 {
        let mut s = self.prox_value(u);
        for ((&v, &q), &c) in u.iter().zip(qu).zip(self.linear.iter()) {
            s += 0.5 * v * q - c * v;
        }
        s
    }

    /// `h(u) + 1/2 <u, Q u> - <c, u>`.
    pub fn objective(&self, u: &Array1<f64>) -> f64 {
        let qu = self.q_times(u);
        self.objective_with(u.as_slice().unwrap(), qu.as_slice().unwrap())
    }

    /// `T(u) = prox_{h/L}(u - (Q u - c)/L)` written into `out`.
    fn forward_backward(&self, u: &[f64], qu: &[f64], step_l: f64, tmp: &mut [f64], out: &mut [f64]) {
        for i in 0..u.len() {
            tmp[i] = u[i] - (qu[i] - self.linear[i]) / step_l;
        }
        for (b, f) in self.blocks.iter().enumerate() {
            let r = self.block_range(b);
            f.prox_into(&tmp[r.clone()], step_l, &mut out[r]);
        }
    }

    /// Prox-gradient mapping norm `L ||u - T(u)||` with `L = lipschitz()`.
    pub fn mapping_residual(&self, u: &Array1<f64>) -> f64 {
        let n = self.dim();
        let qu = self.q_times(u);
        let mut tmp = vec![0.0; n];
        let mut t = vec![0.0; n];
        let l = self.lipschitz.max(f64::MIN_POSITIVE);
        self.forward_backward(u.as_slice().unwrap(), qu.as_slice().unwrap(), l, &mut tmp, &mut t);
        l * u.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// Per-term diagonals when every operator is square diagonal (or absent).
    fn diagonal_terms(&self) -> Option<Vec<(f64, Vec<Option<Array1<f64>>>)>> {
        let mut out = Vec::with_capacity(self.quad_terms.len());
        for t in &self.quad_terms {
            let mut ds = Vec::with_capacity(t.ops.len());
            for op in &t.ops {
                match op {
                    None => ds.push(None),
                    Some(op) if op.is_zero() => ds.push(None),
                    Some(op) => ds.push(Some(op.diagonal_entries()?)),
                }
            }
            out.push((t.sigma, ds));
        }
        Some(out)
    }

    /// Diagonal of `Q` when it is diagonal.
    fn folded_diagonal(&self, terms: &[(f64, Vec<Option<Array1<f64>>>)]) -> Option<Array1<f64>> {
        let mut d = Array1::zeros(self.dim());
        for (b, &s) in self.diag_shift.iter().enumerate() {
            d.slice_mut(ndarray::s![self.block_range(b)]).fill(s);
        }
        for (sigma, ds) in terms {
            let present: Vec<usize> = ds.iter().enumerate().filter(|(_, d)| d.is_some()).map(|(b, _)| b).collect();
            match present.len() {
                0 => {}
                1 => {
                    let b = present[0];
                    let diag = ds[b].as_ref().unwrap();
                    let r = self.block_range(b);
                    for (j, i) in r.enumerate() {
                        d[i] += sigma * diag[j] * diag[j];
                    }
                }
                _ => return None,
            }
        }
        Some(d)
    }

    /// Two blocks of equal dimension whose operators are all square diagonal.
    /// Returns per-coordinate `(q11, q12, q22)`.
    fn paired_coefficients(&self, terms: &[(f64, Vec<Option<Array1<f64>>>)]) -> Option<Vec<[f64; 3]>> {
        if self.blocks.len() != 2 || self.blocks[0].dim() != self.blocks[1].dim() {
            return None;
        }
        let n = self.blocks[0].dim();
        let mut q: Vec<[f64; 3]> = (0..n).map(|_| [self.diag_shift[0], 0.0, self.diag_shift[1]]).collect();
        for (sigma, ds) in terms {
            for (j, qj) in q.iter_mut().enumerate() {
                let a = ds[0].as_ref().map_or(0.0, |d| d[j]);
                let b = ds[1].as_ref().map_or(0.0, |d| d[j]);
                qj[0] += sigma * a * a;
                qj[1] += sigma * a * b;
                qj[2] += sigma * b * b;
            }
        }
        Some(q)
    }
}

pub fn default_inner_tol(k: usize) -> f64 {
    let kf = k.max(1) as f64;
    (1.0 / (kf * kf)).min(1e-8)
}

fn check_finite(u: &[f64], iteration: usize) -> Result<()> {
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical { iteration, reason: "non-finite inner iterate".into() });
    }
    Ok(())
}

/// Solves the subproblem, using an exact path when the structure allows it.
pub fn solve_composite(
    q: &CompositeQuadratic,
    warm_start: &Array1<f64>,
    tol: f64,
    max_inner: usize,
) -> Result<InnerSolution> {
    check_len("warm start", warm_start.len(), q.dim())?;
    if !(tol > 0.0) {
        return invalid(format!("inner tolerance must be positive, got {tol}"));
    }
    if let Some(terms) = q.diagonal_terms() {
        if let Some(d) = q.folded_diagonal(&terms) {
            if d.iter().all(|&v| v > 0.0) {
                let u = solve_diagonal(q, &d);
                check_finite(u.as_slice().unwrap(), 0)?;
                return Ok(InnerSolution { u, residual: 0.0, iterations: 0, path: SolvePath::Diagonal, converged: true });
            }
        }
        if let Some(coef) = q.paired_coefficients(&terms) {
            if coef.iter().all(|c| c[0] > 0.0 && c[2] > 0.0 && c[0] * c[2] - c[1] * c[1] > 0.0) {
                let u = solve_paired(q, &coef);
                check_finite(u.as_slice().unwrap(), 0)?;
                return Ok(InnerSolution { u, residual: 0.0, iterations: 0, path: SolvePath::Paired, converged: true });
            }
        }
    }
    solve_general(q, warm_start, tol, max_inner)
}

fn solve_diagonal(q: &CompositeQuadratic, d: &Array1<f64>) -> Array1<f64> {
    let mut u = Array1::zeros(q.dim());
    for (b, f) in q.blocks.iter().enumerate() {
        for (j, i) in q.block_range(b).enumerate() {
            u[i] = f.piece(j).prox(q.linear[i] / d[i], d[i]);
        }
    }
    u
}

/// Exact minimizer of `h1(u) + h2(v) + 1/2 [u v] [[q11 q12] [q12 q22]] [u v]^T - l1 u - l2 v`
/// by enumerating the kink states of both pieces.
fn paired_minimizer(p1: ScalarPiece, p2: ScalarPiece, coef: [f64; 3], l1: f64, l2: f64) -> (f64, f64) {
    let q11 = coef[0] + p1.mu;
    let q12 = coef[1];
    let q22 = coef[2] + p2.mu;
    let (w1, c1, w2, c2) = (p1.w, p1.c, p2.w, p2.c);
    let phi = |u: f64, v: f64| {
        w1 * (u - c1).abs() + w2 * (v - c2).abs() + 0.5 * (q11 * u * u + 2.0 * q12 * u * v + q22 * v * v)
            - l1 * u
            - l2 * v
    };
    // state: Some(s) = off the kink with sign s (s = 0 when the weight vanishes); None = at the kink
    let states = |w: f64| -> Vec<Option<f64>> {
        if w > 0.0 {
            vec![Some(-1.0), None, Some(1.0)]
        } else {
            vec![Some(0.0)]
        }
    };
    let det = q11 * q22 - q12 * q12;
    let mut best_valid: Option<(f64, f64, f64)> = None;
    let mut best_any: Option<(f64, f64, f64)> = None;
    for s1 in states(w1) {
        for s2 in states(w2) {
            let (u, v) = match (s1, s2) {
                (Some(a), Some(b)) => {
                    let r1 = l1 - w1 * a;
                    let r2 = l2 - w2 * b;
                    ((q22 * r1 - q12 * r2) / det, (q11 * r2 - q12 * r1) / det)
                }
                (None, Some(b)) => (c1, (l2 - w2 * b - q12 * c1) / q22),
                (Some(a), None) => ((l1 - w1 * a - q12 * c2) / q11, c2),
                (None, None) => (c1, c2),
            };
            let ok1 = match s1 {
                Some(a) => a * (u - c1) >= -1e-12 * (1.0 + u.abs() + c1.abs()),
                None => (l1 - q11 * u - q12 * v).abs() <= w1 * (1.0 + 1e-12) + 1e-12,
            };
            let ok2 = match s2 {
                Some(b) => b * (v - c2) >= -1e-12 * (1.0 + v.abs() + c2.abs()),
                None => (l2 - q12 * u - q22 * v).abs() <= w2 * (1.0 + 1e-12) + 1e-12,
            };
            let val = phi(u, v);
            if ok1 && ok2 && best_valid.is_none_or(|(bv, _, _)| val < bv) {
                best_valid = Some((val, u, v));
            }
            if best_any.is_none_or(|(bv, _, _)| val < bv) {
                best_any = Some((val, u, v));
            }
        }
    }
    let (_, u, v) = best_valid.or(best_any).unwrap();
    (u, v)
}

fn solve_paired(q: &CompositeQuadratic, coef: &[[f64; 3]]) -> Array1<f64> {
    let n = coef.len();
    let mut u = Array1::zeros(2 * n);
    for (j, c) in coef.iter().enumerate() {
        let (a, b) = paired_minimizer(q.blocks[0].piece(j), q.blocks[1].piece(j), *c, q.linear[j], q.linear[n + j]);
        u[j] = a;
        u[n + j] = b;
    }
    u
}

/// Accelerated proximal gradient. With a known strong-convexity modulus the
/// momentum is the constant `(1 - sqrt(mu/L)) / (1 + sqrt(mu/L))`; otherwise
/// FISTA weights with gradient-based restart. Objective comparisons are avoided
/// since near the minimizer they are decided by rounding.
pub fn solve_general(
    q: &CompositeQuadratic,
    warm_start: &Array1<f64>,
    tol: f64,
    max_inner: usize,
) -> Result<InnerSolution> {
    check_len("warm start", warm_start.len(), q.dim())?;
    let n = q.dim();
    let l = q.lipschitz().max(f64::MIN_POSITIVE);
    let mu = q
        .blocks
        .iter()
        .zip(&q.diag_shift)
        .map(|(f, s)| s + f.strong_convexity())
        .fold(f64::INFINITY, f64::min)
        .min(l);
    let momentum = if mu > 0.0 && mu.is_finite() {
        let r = (mu / l).sqrt();
        Some((1.0 - r) / (1.0 + r))
    } else {
        None
    };
    let mut scratch = Vec::new();
    let mut tmp = vec![0.0; n];

    let mut x = warm_start.to_vec();
    let mut qx = vec![0.0; n];
    q.apply_q(&x, &mut qx, &mut scratch);
    let mut x_prev = x.clone();
    let mut qx_prev = qx.clone();
    let mut t = 1.0f64;

    let mut y = vec![0.0; n];
    let mut qy = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut qz = vec![0.0; n];
    let mut tz = vec![0.0; n];

    let residual_at = |u: &[f64], qu: &[f64], tmp: &mut [f64], out: &mut [f64]| -> f64 {
        q.forward_backward(u, qu, l, tmp, out);
        l * u.iter().zip(out.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let mut residual = residual_at(&x, &qx, &mut tmp, &mut tz);
    if !l.is_finite() || !residual.is_finite() {
        return Err(Error::Numerical { iteration: 0, reason: "non-finite step size or starting residual".into() });
    }
    let unorm = |u: &[f64]| u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if residual <= tol * (1.0 + unorm(&x)) {
        check_finite(&x, 0)?;
        return Ok(InnerSolution {
            u: Array1::from(x),
            residual,
            iterations: 0,
            path: SolvePath::General,
            converged: true,
        });
    }

    let mut it = 0;
    while it < max_inner {
        it += 1;
        let beta = match momentum {
            Some(b) => b,
            None => {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                let b = (t - 1.0) / t_next;
                t = t_next;
                b
            }
        };
        for i in 0..n {
            y[i] = x[i] + beta * (x[i] - x_prev[i]);
            qy[i] = qx[i] + beta * (qx[i] - qx_prev[i]);
        }
        q.forward_backward(&y, &qy, l, &mut tmp, &mut z);
        q.apply_q(&z, &mut qz, &mut scratch);
        // gradient restart for the momentum-free schedule: drop momentum when
        // the step z - x points against the extrapolation y - z
        let restart = momentum.is_none() && (0..n).map(|i| (y[i] - z[i]) * (z[i] - x[i])).sum::<f64>() > 0.0;
        if restart {
            t = 1.0;
            x_prev.copy_from_slice(&z);
            qx_prev.copy_from_slice(&qz);
        } else {
            std::mem::swap(&mut x_prev, &mut x);
            std::mem::swap(&mut qx_prev, &mut qx);
        }
        std::mem::swap(&mut x, &mut z);
        std::mem::swap(&mut qx, &mut qz);
        check_finite(&x, it)?;
        residual = residual_at(&x, &qx, &mut tmp, &mut tz);
        if residual <= tol * (1.0 + unorm(&x)) {
            return Ok(InnerSolution {
                u: Array1::from(x),
                residual,
                iterations: it,
                path: SolvePath::General,
                converged: true,
            });
        }
    }
    Ok(InnerSolution { u: Array1::from(x), residual, iterations: it, path: SolvePath::General, converged: false })
}

fn adjoint(op: &LinearOperator, v: &Array1<f64>, s: f64, out: &mut Array1<f64>) {
    op.adjoint_add(v.as_slice().unwrap(), s, out.as_slice_mut().unwrap());
}

fn check_coeffs(c: &StepCoefficients) -> Result<()> {
    let vals = [c.alpha, c.beta, c.epsilon, c.theta, c.eta_f, c.eta_g];
    if vals.iter().any(|v| !v.is_finite()) || !(c.alpha > 0.0 && c.beta > 0.0 && c.theta > 0.0) {
        return invalid(format!("step coefficients must be finite and positive at k={}", c.k));
    }
    Ok(())
}

/// Joint `(x, y)` subproblem:
/// `L_theta(x, y, lt) + eta_f/(2 a b) ||x - xt||^2 + eta_g/(2 a b) ||y - yt||^2 + eps/2 (||x||^2 + ||y||^2)`.
pub fn assemble_joint<'a>(
    p: &'a ProblemInstance,
    c: &StepCoefficients,
    lambda_tilde: &Array1<f64>,
    x_tilde: &Array1<f64>,
    y_tilde: &Array1<f64>,
) -> Result<CompositeQuadratic<'a>> {
    check_coeffs(c)?;
    p.check_dual(lambda_tilde)?;
    p.check_point(x_tilde, y_tilde)?;
    let ab = c.alpha * c.beta;
    let (nx, ny) = (p.nx(), p.ny());
    let mut cx = x_tilde * (c.eta_f / ab);
    adjoint(&p.a, lambda_tilde, -1.0, &mut cx);
    adjoint(&p.a, &p.rhs, c.theta, &mut cx);
    let mut cy = y_tilde * (c.eta_g / ab);
    adjoint(&p.b_op, lambda_tilde, -1.0, &mut cy);
    adjoint(&p.b_op, &p.rhs, c.theta, &mut cy);
    let mut linear = Array1::zeros(nx + ny);
    linear.slice_mut(ndarray::s![..nx]).assign(&cx);
    linear.slice_mut(ndarray::s![nx..]).assign(&cy);
    CompositeQuadratic::new(
        vec![&p.f, &p.g],
        vec![QuadTerm { sigma: c.theta, ops: vec![Some(&p.a), Some(&p.b_op)] }],
        vec![c.eta_f / ab + c.epsilon, c.eta_g / ab + c.epsilon],
        linear,
    )
}

/// `x` subproblem with `y` frozen at `y_k`.
pub fn assemble_x_split<'a>(
    p: &'a ProblemInstance,
    c: &StepCoefficients,
    lambda_tilde_1: &Array1<f64>,
    x_tilde: &Array1<f64>,
    y_k: &Array1<f64>,
) -> Result<CompositeQuadratic<'a>> {
    check_coeffs(c)?;
    p.check_dual(lambda_tilde_1)?;
    p.check_point(x_tilde, y_k)?;
    let ab = c.alpha * c.beta;
    // By_k - b
    let mut r = -&p.rhs;
    p.b_op.apply_add(y_k.as_slice().unwrap(), 1.0, r.as_slice_mut().unwrap());
    let mut cx = x_tilde * (c.eta_f / ab);
    adjoint(&p.a, lambda_tilde_1, -1.0, &mut cx);
    adjoint(&p.a, &r, -c.theta, &mut cx);
    CompositeQuadratic::new(
        vec![&p.f],
        vec![QuadTerm { sigma: c.theta, ops: vec![Some(&p.a)] }],
        vec![c.eta_f / ab + c.epsilon],
        cx,
    )
}

/// `y` subproblem with `x` frozen at `x_{k+1}`.
pub fn assemble_y_split<'a>(
    p: &'a ProblemInstance,
    c: &StepCoefficients,
    lambda_tilde_2: &Array1<f64>,
    y_tilde: &Array1<f64>,
    x_next: &Array1<f64>,
) -> Result<CompositeQuadratic<'a>> {
    check_coeffs(c)?;
    p.check_dual(lambda_tilde_2)?;
    p.check_point(x_next, y_tilde)?;
    let ab = c.alpha * c.beta;
    let mut r = -&p.rhs;
    p.a.apply_add(x_next.as_slice().unwrap(), 1.0, r.as_slice_mut().unwrap());
    let mut cy = y_tilde * (c.eta_g / ab);
    adjoint(&p.b_op, lambda_tilde_2, -1.0, &mut cy);
    adjoint(&p.b_op, &r, -c.theta, &mut cy);
    CompositeQuadratic::new(
        vec![&p.g],
        vec![QuadTerm { sigma: c.theta, ops: vec![Some(&p.b_op)] }],
        vec![c.eta_g / ab + c.epsilon],
        cy,
    )
}

/// Concatenation helper used by callers that split the joint solution.
pub(crate) fn split_blocks(u: &Array1<f64>, nx: usize) -> (Array1<f64>, Array1<f64>) {
    (u.slice(ndarray::s![..nx]).to_owned(), u.slice(ndarray::s![nx..]).to_owned())
}
