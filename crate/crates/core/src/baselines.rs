//! Reference methods: two-block ADMM, Chambolle-Pock (PDHG) and its accelerated
//! variant for a strongly convex `g`, plus a high-accuracy ADMM oracle.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{residual_row, IterationTrace};
use crate::error::{invalid, Error, Result};
use crate::model::{OperatorKind, ProblemInstance, SaddlePoint};
use crate::solvers::{Budget, InnerConfig, ProbeConfig, RunResult, SolverState, StopReason};
use crate::subproblem::{solve_composite, CompositeQuadratic, QuadTerm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Admm,
    Cp,
    CpScvx,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Admm => "admm",
            BaselineMethod::Cp => "cp",
            BaselineMethod::CpScvx => "cp_scvx",
        }
    }
}

fn default_theta() -> f64 {
    1.0
}

fn default_gamma_cp() -> f64 {
    0.999
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// ADMM penalty; dual step `sigma` for the CP methods.
    pub rho: f64,
    /// CP primal step; defaults to `gamma_cp / (rho ||K||^2)`.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Step-size safety factor for CP; acceleration modulus source for CP-scvx is `g`.
    #[serde(default = "default_gamma_cp")]
    pub gamma_cp: f64,
    /// ADMM proximal weights `tau_x/2 |x - x_k|^2`, `tau_y/2 |y - y_k|^2`.
    #[serde(default)]
    pub prox_x: f64,
    #[serde(default)]
    pub prox_y: f64,
}

impl BaselineConfig {
    pub fn admm(rho: f64) -> Self {
        Self { method: BaselineMethod::Admm, rho, tau: None, theta: 1.0, gamma_cp: 0.999, prox_x: 0.0, prox_y: 0.0 }
    }

    pub fn cp(rho: f64) -> Self {
        Self { method: BaselineMethod::Cp, ..Self::admm(rho) }
    }

    pub fn cp_scvx(rho: f64) -> Self {
        Self { method: BaselineMethod::CpScvx, ..Self::admm(rho) }
    }

    /// Checks parameters against `p` and resolves the CP primal step.
    pub fn resolve(&self, p: &ProblemInstance) -> Result<ResolvedBaseline> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return invalid(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.prox_x >= 0.0 && self.prox_y >= 0.0) {
            return invalid("ADMM proximal weights must be nonnegative");
        }
        match self.method {
            BaselineMethod::Admm => Ok(ResolvedBaseline { cfg: self.clone(), tau: 0.0, mu: 0.0 }),
            BaselineMethod::Cp | BaselineMethod::CpScvx => {
                if !matches!(p.a.kind(), OperatorKind::Identity(_)) {
                    return invalid("primal-dual hybrid gradient needs A = identity to eliminate x");
                }
                if !(0.0..=1.0).contains(&self.theta) {
                    return invalid(format!("theta must lie in [0, 1], got {}", self.theta));
                }
                if !(self.gamma_cp > 0.0 && self.gamma_cp < 1.0) {
                    return invalid(format!("gamma_cp must lie in (0, 1), got {}", self.gamma_cp));
                }
                let nk = p.b_op.operator_norm();
                let nk2 = nk * nk;
                let tau = match self.tau {
                    Some(t) => t,
                    None if nk2 > 0.0 => self.gamma_cp / (self.rho * nk2),
                    None => 1.0,
                };
                if !(tau > 0.0 && tau.is_finite()) {
                    return invalid(format!("tau must be positive, got {tau}"));
                }
                if tau * self.rho * nk2 >= 1.0 {
                    return invalid(format!("step sizes violate tau*rho*||K||^2 < 1: {}", tau * self.rho * nk2));
                }
                let mu = p.mu_g();
                if self.method == BaselineMethod::CpScvx && !(mu > 0.0) {
                    return invalid("accelerated PDHG needs a strongly convex g");
                }
                Ok(ResolvedBaseline { cfg: self.clone(), tau, mu })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedBaseline {
    pub cfg: BaselineConfig,
    pub tau: f64,
    /// Strong convexity modulus of `g` (CP-scvx).
    pub mu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub k: usize,
    pub x: Array1<f64>,
    pub y: Array1<f64>,
    pub lambda: Array1<f64>,
    /// PDHG extrapolated point.
    pub y_bar: Array1<f64>,
    pub tau: f64,
    pub sigma: f64,
    pub theta: f64,
}

impl BaselineState {
    pub fn new(
        p: &ProblemInstance,
        rb: &ResolvedBaseline,
        x0: &Array1<f64>,
        y0: &Array1<f64>,
        lambda0: &Array1<f64>,
    ) -> Result<Self> {
        p.check_point(x0, y0)?;
        p.check_dual(lambda0)?;
        let x = match rb.cfg.method {
            BaselineMethod::Admm => x0.clone(),
            // x is eliminated: x = b - B y
            _ => eliminated_x(p, y0),
        };
        Ok(Self {
            k: 1,
            x,
            y: y0.clone(),
            lambda: lambda0.clone(),
            y_bar: y0.clone(),
            tau: rb.tau,
            sigma: rb.cfg.rho,
            theta: rb.cfg.theta,
        })
    }

    fn as_solver_state(&self) -> SolverState {
        SolverState {
            k: self.k,
            x: self.x.clone(),
            y: self.y.clone(),
            lambda: self.lambda.clone(),
            z: self.x.clone(),
            h: self.y.clone(),
        }
    }
}

fn eliminated_x(p: &ProblemInstance, y: &Array1<f64>) -> Array1<f64> {
    let mut x = p.rhs.clone();
    p.b_op.apply_add(y.as_slice().unwrap(), -1.0, x.as_slice_mut().unwrap());
    x
}

fn finite(s: &BaselineState) -> Result<()> {
    if [&s.x, &s.y, &s.lambda].iter().any(|v| v.iter().any(|e| !e.is_finite())) {
        return Err(Error::Numerical { iteration: s.k, reason: "non-finite baseline iterate".into() });
    }
    Ok(())
}

/// One ADMM sweep on `L_rho(x, y, lambda) = f + g + <lambda, r> + rho/2 |r|^2`:
/// x-minimization, y-minimization, then `lambda += rho (A x + B y - b)`.
pub fn admm_step(p: &ProblemInstance, rb: &ResolvedBaseline, s: &BaselineState, inner: &InnerConfig) -> Result<BaselineState> {
    let rho = rb.cfg.rho;
    let tol = inner.tol_at(s.k);
    // x: c = -A^T lambda - rho A^T (B y - b) + prox_x x_k
    let mut r = -&p.rhs;
    p.b_op.apply_add(s.y.as_slice().unwrap(), 1.0, r.as_slice_mut().unwrap());
    let mut cx = &s.x * rb.cfg.prox_x;
    p.a.adjoint_add(s.lambda.as_slice().unwrap(), -1.0, cx.as_slice_mut().unwrap());
    p.a.adjoint_add(r.as_slice().unwrap(), -rho, cx.as_slice_mut().unwrap());
    let qx = CompositeQuadratic::new(
        vec![&p.f],
        vec![QuadTerm { sigma: rho, ops: vec![Some(&p.a)] }],
        vec![rb.cfg.prox_x],
        cx,
    )?;
    let x = solve_composite(&qx, &s.x, tol, inner.max_inner)?.u;

    let mut r = -&p.rhs;
    p.a.apply_add(x.as_slice().unwrap(), 1.0, r.as_slice_mut().unwrap());
    let mut cy = &s.y * rb.cfg.prox_y;
    p.b_op.adjoint_add(s.lambda.as_slice().unwrap(), -1.0, cy.as_slice_mut().unwrap());
    p.b_op.adjoint_add(r.as_slice().unwrap(), -rho, cy.as_slice_mut().unwrap());
    let qy = CompositeQuadratic::new(
        vec![&p.g],
        vec![QuadTerm { sigma: rho, ops: vec![Some(&p.b_op)] }],
        vec![rb.cfg.prox_y],
        cy,
    )?;
    let y = solve_composite(&qy, &s.y, tol, inner.max_inner)?.u;

    let res = p.constraint_residual(&x, &y);
    let lambda = &s.lambda + &(res * rho);
    let next = BaselineState { k: s.k + 1, x, y: y.clone(), lambda, y_bar: y, ..s.clone() };
    finite(&next)?;
    Ok(next)
}

/// PDHG on `min_y g(y) + F(K y)` with `K = -B`, `F(z) = f(z + b)`; the dual
/// variable is `u = -lambda`. With `accelerate`, the step sizes follow
/// `theta = 1/sqrt(1 + 2 mu tau)`, `tau <- theta tau`, `sigma <- sigma / theta`.
fn pdhg_step(p: &ProblemInstance, rb: &ResolvedBaseline, s: &BaselineState, accelerate: bool) -> Result<BaselineState> {
    let (sigma, tau) = (s.sigma, s.tau);
    let m = p.m();
    // v = u + sigma K y_bar = -lambda - sigma B y_bar
    let mut v = -&s.lambda;
    p.b_op.apply_add(s.y_bar.as_slice().unwrap(), -sigma, v.as_slice_mut().unwrap());
    // prox_{sigma F*}(v) = v - sigma prox_F(v / sigma; sigma), prox_F(w) = prox_f(w + b) - b
    let w = Array1::from_iter(v.iter().zip(&p.rhs).map(|(&vi, &bi)| vi / sigma + bi));
    let mut pf = vec![0.0; m];
    p.f.prox_into(w.as_slice().unwrap(), sigma, &mut pf);
    let u = Array1::from_iter((0..m).map(|i| v[i] - sigma * (pf[i] - p.rhs[i])));
    // y = prox_{tau g}(y - tau K^T u) = prox_g(y + tau B^T u; 1/tau)
    let mut gy = s.y.clone();
    p.b_op.adjoint_add(u.as_slice().unwrap(), tau, gy.as_slice_mut().unwrap());
    let mut y = Array1::zeros(p.ny());
    p.g.prox_into(gy.as_slice().unwrap(), 1.0 / tau, y.as_slice_mut().unwrap());
    let (theta, tau_next, sigma_next) = if accelerate {
        let th = 1.0 / (1.0 + 2.0 * rb.mu * tau).sqrt();
        (th, th * tau, sigma / th)
    } else {
        (rb.cfg.theta, tau, sigma)
    };
    let y_bar = Array1::from_iter(y.iter().zip(&s.y).map(|(&yn, &yo)| yn + theta * (yn - yo)));
    let next = BaselineState {
        k: s.k + 1,
        x: eliminated_x(p, &y),
        y,
        lambda: -u,
        y_bar,
        tau: tau_next,
        sigma: sigma_next,
        theta,
    };
    finite(&next)?;
    Ok(next)
}

pub fn cp_step(p: &ProblemInstance, rb: &ResolvedBaseline, s: &BaselineState) -> Result<BaselineState> {
    pdhg_step(p, rb, s, false)
}

pub fn cp_scvx_step(p: &ProblemInstance, rb: &ResolvedBaseline, s: &BaselineState) -> Result<BaselineState> {
    if !(rb.mu > 0.0) {
        return invalid("accelerated PDHG needs a strongly convex g");
    }
    pdhg_step(p, rb, s, true)
}

pub fn baseline_step(
    p: &ProblemInstance,
    rb: &ResolvedBaseline,
    s: &BaselineState,
    inner: &InnerConfig,
) -> Result<BaselineState> {
    match rb.cfg.method {
        BaselineMethod::Admm => admm_step(p, rb, s, inner),
        BaselineMethod::Cp => cp_step(p, rb, s),
        BaselineMethod::CpScvx => cp_scvx_step(p, rb, s),
    }
}

/// Runs a baseline under the same budget and probe conventions as the main solvers.
pub fn run_baseline(
    p: &ProblemInstance,
    rb: &ResolvedBaseline,
    start: BaselineState,
    budget: &Budget,
    probes: &ProbeConfig,
    inner: &InnerConfig,
) -> Result<(RunResult, BaselineState)> {
    if probes.stride == 0 {
        return invalid("trace stride must be positive");
    }
    let clock = std::time::Instant::now();
    let saddle = probes.saddle.as_ref();
    let reference = probes.reference.as_ref().map(|(x, y)| (x, y));
    let row = |s: &BaselineState| -> Result<crate::diagnostics::TraceRow> {
        let mut r = residual_row(p, &s.as_solver_state(), saddle, reference)?;
        if probes.record_wall_time {
            r.wall_ms = Some(clock.elapsed().as_secs_f64() * 1e3);
        }
        Ok(r)
    };
    let mut trace = IterationTrace::default();
    trace.rows.push(row(&start)?);
    let mut s = start;
    let mut stop = StopReason::MaxIter;
    let mut done = 0;
    for it in 1..=budget.max_iter {
        s = baseline_step(p, rb, &s, inner)?;
        done = it;
        let feas_hit = budget.feas_tol.is_some_and(|t| p.feasibility(&s.x, &s.y) <= t);
        let obj_hit = match (budget.obj_tol, saddle) {
            (Some(t), Some(sd)) => (p.objective(&s.x, &s.y) - sd.phi).abs() <= t,
            _ => false,
        };
        if it % probes.stride == 0 || it == budget.max_iter || feas_hit || obj_hit {
            trace.rows.push(row(&s)?);
        }
        if feas_hit {
            stop = StopReason::Feasibility;
            break;
        }
        if obj_hit {
            stop = StopReason::Objective;
            break;
        }
    }
    let result = RunResult {
        trace,
        state: s.as_solver_state(),
        stop,
        iterations: done,
        max_inner_residual: 0.0,
        unconverged_inner: 0,
    };
    Ok((result, s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOptions {
    pub rho: f64,
    pub max_iter: usize,
    pub check_every: usize,
    /// Proximal weight on the `y` step; `None` picks `0.1 rho ||B||^2` when the
    /// `y` step is not strongly convex and `B` is not diagonal, else 0.
    pub prox_y: Option<f64>,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self { rho: 1.0, max_iter: 1_000_000, check_every: 10, prox_y: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub saddle: SaddlePoint,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn reference_solution(p: &ProblemInstance, tol: f64) -> Result<Reference> {
    reference_solution_with(p, tol, &ReferenceOptions::default())
}

/// High-accuracy ADMM until `kkt_residual <= tol` or the iteration cap.
/// The achieved residual is always reported.
pub fn reference_solution_with(p: &ProblemInstance, tol: f64, opts: &ReferenceOptions) -> Result<Reference> {
    if !(tol > 0.0) {
        return invalid(format!("tolerance must be positive, got {tol}"));
    }
    let diag_b = p.b_op.diagonal_entries().is_some() || p.b_op.is_zero();
    let prox_y = opts.prox_y.unwrap_or_else(|| {
        if p.mu_g() > 0.0 || diag_b {
            0.0
        } else {
            let nb = p.b_op.operator_norm();
            0.1 * opts.rho * nb * nb
        }
    });
    let diag_a = p.a.diagonal_entries().is_some() || p.a.is_zero();
    let prox_x = if p.mu_f() > 0.0 || diag_a {
        0.0
    } else {
        let na = p.a.operator_norm();
        0.1 * opts.rho * na * na
    };
    let cfg = BaselineConfig { prox_x, prox_y, ..BaselineConfig::admm(opts.rho) };
    let rb = cfg.resolve(p)?;
    let mut s = BaselineState::new(p, &rb, &Array1::zeros(p.nx()), &Array1::zeros(p.ny()), &Array1::zeros(p.m()))?;
    let inner_tol = (0.01 * tol).clamp(1e-15, 1e-10);
    let every = opts.check_every.max(1);
    let mut kkt = f64::INFINITY;
    let mut it = 0;
    let saddle_of = |s: &BaselineState| SaddlePoint {
        x: s.x.clone(),
        y: s.y.clone(),
        lambda: s.lambda.clone(),
        phi: p.objective(&s.x, &s.y),
    };
    while it < opts.max_iter {
        let inner = InnerConfig { tol: Some(crate::subproblem::default_inner_tol(s.k).min(inner_tol)), max_inner: 100_000 };
        s = admm_step(p, &rb, &s, &inner)?;
        it += 1;
        if it % every == 0 || it == opts.max_iter {
            kkt = p.kkt_residual(&saddle_of(&s))?;
            if kkt <= tol {
                break;
            }
        }
    }
    Ok(Reference { saddle: saddle_of(&s), kkt_residual: kkt, iterations: it, converged: kkt <= tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{norm, LinearOperator, ProxFunction};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn case(lambda: f64, d: f64, diag: [f64; 3]) -> ProblemInstance {
        ProblemInstance::new(
            ProxFunction::shifted_l1(1.0, vec![d; 3]).unwrap(),
            ProxFunction::l1(lambda, 3).unwrap(),
            LinearOperator::identity(3),
            LinearOperator::diagonal(Array1::from(diag.to_vec())).scaled(-1.0),
            Array1::zeros(3),
        )
        .unwrap()
    }

    fn case_one_saddle() -> SaddlePoint {
        SaddlePoint { x: Array1::zeros(3), y: Array1::zeros(3), lambda: array![1.0, 1.0, 1.0], phi: 6.0 }
    }

    #[test]
    fn saddle_is_fixed_for_every_baseline() {
        let p = case(3.0, 2.0, [2.0, 3.0, 1.0]);
        let s = case_one_saddle();
        for cfg in [BaselineConfig::admm(1.0), BaselineConfig::cp(1.0)] {
            let rb = cfg.resolve(&p).unwrap();
            let mut st = BaselineState::new(&p, &rb, &s.x, &s.y, &s.lambda).unwrap();
            for _ in 0..10 {
                st = baseline_step(&p, &rb, &st, &InnerConfig::default()).unwrap();
            }
            assert!(norm(&(&st.x - &s.x)) < 1e-12 && norm(&(&st.y - &s.y)) < 1e-12);
            assert!(norm(&(&st.lambda - &s.lambda)) < 1e-12, "{:?}", cfg.method);
        }
        // strongly convex g for the accelerated variant: saddle (0, 0, 1) still certifies
        let pe = ProblemInstance::new(
            ProxFunction::shifted_l1(1.0, vec![2.0; 3]).unwrap(),
            ProxFunction::elastic_net(3.0, 0.5, 3).unwrap(),
            LinearOperator::identity(3),
            LinearOperator::diagonal(array![-2.0, -3.0, -1.0]),
            Array1::zeros(3),
        )
        .unwrap();
        assert_eq!(pe.kkt_residual(&s).unwrap(), 0.0);
        let rb = BaselineConfig::cp_scvx(1.0).resolve(&pe).unwrap();
        let mut st = BaselineState::new(&pe, &rb, &s.x, &s.y, &s.lambda).unwrap();
        for _ in 0..10 {
            st = cp_scvx_step(&pe, &rb, &st).unwrap();
        }
        assert!(norm(&st.y) < 1e-12 && norm(&(&st.lambda - &s.lambda)) < 1e-12);
    }

    /// One sweep on f = g = 0, A = B = 1, b = 0 from (1, 1, 0), rho = 1.
    #[test]
    fn admm_scalar_sweep() {
        let p = ProblemInstance::new(
            ProxFunction::zero(1),
            ProxFunction::zero(1),
            LinearOperator::identity(1),
            LinearOperator::identity(1),
            array![0.0],
        )
        .unwrap();
        let rb = BaselineConfig::admm(1.0).resolve(&p).unwrap();
        let st = BaselineState::new(&p, &rb, &array![1.0], &array![1.0], &array![0.0]).unwrap();
        let n = admm_step(&p, &rb, &st, &InnerConfig::default()).unwrap();
        // x = argmin 1/2 (x + 1)^2 = -1; y = argmin 1/2 (y - 1)^2 = 1; lambda = 0 + (-1 + 1) = 0
        assert_eq!((n.x[0], n.y[0], n.lambda[0]), (-1.0, 1.0, 0.0));
        let n2 = admm_step(&p, &rb, &n, &InnerConfig::default()).unwrap();
        assert_eq!((n2.x[0], n2.y[0], n2.lambda[0]), (-1.0, 1.0, 0.0));
    }

    #[test]
    fn step_size_rule_is_enforced() {
        let p = case(3.0, 2.0, [2.0, 3.0, 1.0]);
        let cfg = BaselineConfig { tau: Some(1.0), ..BaselineConfig::cp(1.0) };
        assert!(cfg.resolve(&p).is_err());
        let rb = BaselineConfig::cp(0.5).resolve(&p).unwrap();
        assert!((rb.tau * 0.5 * 9.0 - 0.999).abs() < 1e-12);
        assert!(BaselineConfig::cp_scvx(1.0).resolve(&p).is_err());
        let two_block = ProblemInstance::new(
            ProxFunction::zero(2),
            ProxFunction::zero(2),
            LinearOperator::diagonal(array![2.0, 1.0]),
            LinearOperator::identity(2),
            Array1::zeros(2),
        )
        .unwrap();
        assert!(BaselineConfig::cp(1.0).resolve(&two_block).is_err());
    }

    #[test]
    fn accelerated_parameters_follow_recursion() {
        let p = ProblemInstance::new(
            ProxFunction::shifted_l1(1.0, vec![1.0; 2]).unwrap(),
            ProxFunction::elastic_net(0.1, 0.4, 2).unwrap(),
            LinearOperator::identity(2),
            LinearOperator::diagonal(array![-1.0, -2.0]),
            Array1::zeros(2),
        )
        .unwrap();
        let rb = BaselineConfig::cp_scvx(1.0).resolve(&p).unwrap();
        let mut st = BaselineState::new(&p, &rb, &Array1::ones(2), &Array1::ones(2), &Array1::zeros(2)).unwrap();
        let mut prev_theta = 0.0;
        for _ in 0..1000 {
            let tau0 = st.tau;
            let sigma0 = st.sigma;
            let n = cp_scvx_step(&p, &rb, &st).unwrap();
            let th = 1.0 / (1.0 + 2.0 * 0.4 * tau0).sqrt();
            assert_eq!(n.theta, th);
            assert_eq!(n.tau, th * tau0);
            assert_eq!(n.sigma, sigma0 / th);
            assert!(n.theta > 0.0 && n.theta < 1.0);
            assert!(n.tau < tau0);
            assert!(n.theta >= prev_theta);
            // the product sigma * tau is invariant
            assert!((n.sigma * n.tau - sigma0 * tau0).abs() <= 1e-12 * sigma0 * tau0);
            prev_theta = n.theta;
            st = n;
        }
    }

    /// Empirical iteration matrix of PDHG with F = G = 0 on (lambda, y, y_bar),
    /// compared against the hand-derived matrix and its spectrum.
    #[test]
    fn linear_iteration_spectrum() {
        let p = ProblemInstance::new(
            ProxFunction::zero(1),
            ProxFunction::zero(1),
            LinearOperator::identity(1),
            LinearOperator::identity(1),
            array![0.0],
        )
        .unwrap();
        let rb = BaselineConfig::cp(1.0).resolve(&p).unwrap();
        let mut cols = Vec::new();
        for e in 0..3 {
            let mut v = [0.0; 3];
            v[e] = 1.0;
            let st = BaselineState {
                k: 1,
                x: array![0.0],
                y: array![v[1]],
                lambda: array![v[0]],
                y_bar: array![v[2]],
                tau: rb.tau,
                sigma: 1.0,
                theta: 1.0,
            };
            let n = cp_step(&p, &rb, &st).unwrap();
            cols.push([n.lambda[0], n.y[0], n.y_bar[0]]);
        }
        let m = nalgebra::Matrix3::from_fn(|i, j| cols[j][i]);
        // F* is the indicator of {0}: the dual collapses, y is frozen, y_bar = y
        let hand = nalgebra::Matrix3::new(0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0);
        assert!((m - hand).abs().max() < 1e-15);
        let eig = m.complex_eigenvalues();
        let radius = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!((radius - 1.0).abs() < 1e-12);
    }

    fn toy(seed: u64, mu: f64) -> ProblemInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b: Array1<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        // min 1/2 |M y - b|^2 + g(y) as  x - M y = -b, f = 1/2 |x|^2
        let g = if mu > 0.0 { ProxFunction::elastic_net(0.1, mu, 4).unwrap() } else { ProxFunction::l1(0.1, 4).unwrap() };
        ProblemInstance::new(
            ProxFunction::squared_l2(1.0, 3).unwrap(),
            g,
            LinearOperator::identity(3),
            LinearOperator::from_rows(&rows).unwrap().scaled(-1.0),
            -b,
        )
        .unwrap()
    }

    fn run_for(p: &ProblemInstance, cfg: BaselineConfig, iters: usize) -> f64 {
        let rb = cfg.resolve(p).unwrap();
        let mut st = BaselineState::new(p, &rb, &Array1::zeros(p.nx()), &Array1::zeros(p.ny()), &Array1::zeros(p.m())).unwrap();
        for _ in 0..iters {
            st = baseline_step(p, &rb, &st, &InnerConfig::default()).unwrap();
        }
        p.objective(&st.x, &st.y)
    }

    #[test]
    fn lasso_toy_cp_matches_admm_oracle() {
        let p = toy(1, 0.0);
        let r = reference_solution(&p, 1e-10).unwrap();
        assert!(r.converged, "kkt {}", r.kkt_residual);
        let cp = run_for(&p, BaselineConfig::cp(1.0), 100_000);
        assert!((cp - r.saddle.phi).abs() <= 1e-6, "{cp} vs {}", r.saddle.phi);
    }

    #[test]
    fn elastic_net_toy_scvx_matches_admm_oracle() {
        let p = toy(2, 0.3);
        let r = reference_solution(&p, 1e-10).unwrap();
        assert!(r.converged);
        let cp = run_for(&p, BaselineConfig::cp_scvx(1.0), 100_000);
        assert!((cp - r.saddle.phi).abs() <= 1e-6, "{cp} vs {}", r.saddle.phi);
    }

    #[test]
    fn reference_recovers_l1l1_optimal_values() {
        for (lam, diag) in [(3.0, [2.0, 3.0, 1.0]), (2.0, [1.0, 1.0, 2.0])] {
            let p = case(lam, 2.0, diag);
            let r = reference_solution(&p, 1e-8).unwrap();
            assert!(r.converged && r.kkt_residual <= 1e-8);
            assert!((r.saddle.phi - 6.0).abs() <= 1e-7, "{}", r.saddle.phi);
        }
        let p = case(3.0, 2.0, [2.0, 3.0, 1.0]);
        assert_eq!(p.kkt_residual(&case_one_saddle()).unwrap(), 0.0);
    }

    #[test]
    fn reference_reports_cap() {
        let p = toy(3, 0.0);
        let opts = ReferenceOptions { max_iter: 3, ..Default::default() };
        let r = reference_solution_with(&p, 1e-14, &opts).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        assert!(r.kkt_residual.is_finite());
        assert!(reference_solution(&p, 0.0).is_err());
    }

    #[test]
    fn admm_feasibility_decays() {
        let p = toy(4, 0.0);
        let rb = BaselineConfig::admm(1.0).resolve(&p).unwrap();
        let mut st = BaselineState::new(&p, &rb, &Array1::zeros(3), &Array1::zeros(4), &Array1::zeros(3)).unwrap();
        let mut early = 0.0;
        for k in 0..2000 {
            st = admm_step(&p, &rb, &st, &InnerConfig::default()).unwrap();
            if k == 10 {
                early = p.feasibility(&st.x, &st.y);
            }
        }
        assert!(p.feasibility(&st.x, &st.y) < early.max(1e-12));
        assert!(norm(&st.lambda).is_finite());
    }
}
