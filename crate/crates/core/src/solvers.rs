//! The joint, split and single-block primal-dual iterations, the scheme
//! residual that certifies each step, and a budgeted runner.

use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{energy_at, residual_row, IterationTrace};
use crate::error::{check_len, invalid, Error, Result};
use crate::model::{norm, ProblemInstance, SaddlePoint};
use crate::schedules::{coeffs_at, ParameterSchedule, StepCoefficients};
use crate::subproblem::{
    assemble_joint, assemble_x_split, assemble_y_split, default_inner_tol, solve_composite, split_blocks,
    InnerSolution, SolvePath,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Joint,
    Split,
    Nonseparable,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Joint => "joint",
            Algorithm::Split => "split",
            Algorithm::Nonseparable => "nonseparable",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub k: usize,
    pub x: Array1<f64>,
    pub y: Array1<f64>,
    pub lambda: Array1<f64>,
    pub z: Array1<f64>,
    pub h: Array1<f64>,
}

impl SolverState {
    /// `Z^d = delta Z + (1 - delta gamma) x`
    pub fn z_delta(&self, delta: f64, gamma: f64) -> Array1<f64> {
        extrapolate(&self.z, &self.x, delta, gamma)
    }

    /// `H^d = delta H + (1 - delta gamma) y`
    pub fn h_delta(&self, delta: f64, gamma: f64) -> Array1<f64> {
        extrapolate(&self.h, &self.y, delta, gamma)
    }

    fn is_finite(&self) -> bool {
        [&self.x, &self.y, &self.lambda, &self.z, &self.h]
            .iter()
            .all(|v| v.iter().all(|e| e.is_finite()))
    }
}

fn extrapolate(z: &Array1<f64>, x: &Array1<f64>, delta: f64, gamma: f64) -> Array1<f64> {
    let w = 1.0 - delta * gamma;
    Array1::from_iter(z.iter().zip(x).map(|(&zi, &xi)| delta * zi + w * xi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepWorkspace {
    pub coeffs: StepCoefficients,
    pub lambda_tilde: Array1<f64>,
    pub lambda_tilde_1: Array1<f64>,
    pub lambda_tilde_2: Array1<f64>,
    /// Multiplier paired with the `x` inclusion.
    pub lambda_bar: Array1<f64>,
    /// Multiplier paired with the `y` inclusion.
    pub lambda_hat: Array1<f64>,
    pub x_tilde: Array1<f64>,
    pub y_tilde: Array1<f64>,
    /// Largest inner mapping residual of the step.
    pub inner_residual: f64,
    pub inner_iterations: usize,
    pub inner_converged: bool,
    pub paths: Vec<SolvePath>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerConfig {
    /// Fixed inner tolerance; `None` uses `min(1e-8, 1/k^2)`.
    pub tol: Option<f64>,
    pub max_inner: usize,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self { tol: None, max_inner: 50_000 }
    }
}

impl InnerConfig {
    pub fn tol_at(&self, k: usize) -> f64 {
        self.tol.unwrap_or_else(|| default_inner_tol(k))
    }
}

/// `x = x0, y = y0, lambda = lambda0, Z = gamma x0, H = gamma y0, k = 1`.
pub fn init_state(
    p: &ProblemInstance,
    sched: &ParameterSchedule,
    x0: &Array1<f64>,
    y0: &Array1<f64>,
    lambda0: &Array1<f64>,
) -> Result<SolverState> {
    p.check_point(x0, y0)?;
    p.check_dual(lambda0)?;
    sched.check()?;
    Ok(SolverState {
        k: 1,
        x: x0.clone(),
        y: y0.clone(),
        lambda: lambda0.clone(),
        z: x0 * sched.gamma,
        h: y0 * sched.gamma,
    })
}

fn check_state(p: &ProblemInstance, s: &SolverState) -> Result<()> {
    p.check_point(&s.x, &s.y)?;
    p.check_dual(&s.lambda)?;
    check_len("Z", s.z.len(), p.nx())?;
    check_len("H", s.h.len(), p.ny())?;
    if s.k == 0 {
        return invalid("iteration counter starts at 1");
    }
    Ok(())
}

/// `Z_{k+1} = (gamma + 1/alpha) x_{k+1} - (1/alpha) x_k`
fn momentum_update(gamma: f64, alpha: f64, next: &Array1<f64>, prev: &Array1<f64>) -> Array1<f64> {
    let a = gamma + 1.0 / alpha;
    let b = 1.0 / alpha;
    Array1::from_iter(next.iter().zip(prev).map(|(&n, &p)| a * n - b * p))
}

/// `x + (Z - gamma x) / eta`
fn prox_center(x: &Array1<f64>, z: &Array1<f64>, gamma: f64, eta: f64) -> Array1<f64> {
    Array1::from_iter(x.iter().zip(z).map(|(&xi, &zi)| xi + (zi - gamma * xi) / eta))
}

/// `A u + B v - b`
fn residual(p: &ProblemInstance, u: &Array1<f64>, v: &Array1<f64>) -> Array1<f64> {
    p.constraint_residual(u, v)
}

fn wrap_inner(k: usize, e: Error) -> Error {
    match e {
        Error::Numerical { iteration, reason } => Error::Numerical {
            iteration: k,
            reason: format!("inner iteration {iteration}: {reason}"),
        },
        other => other,
    }
}

struct InnerLog {
    residual: f64,
    iterations: usize,
    converged: bool,
    paths: Vec<SolvePath>,
}

impl InnerLog {
    fn new() -> Self {
        Self { residual: 0.0, iterations: 0, converged: true, paths: Vec::new() }
    }

    fn add(&mut self, s: &InnerSolution) {
        self.residual = self.residual.max(s.residual);
        self.iterations += s.iterations;
        self.converged &= s.converged;
        self.paths.push(s.path);
    }
}

fn finish(
    p: &ProblemInstance,
    sched: &ParameterSchedule,
    state: &SolverState,
    c: StepCoefficients,
    x_next: Array1<f64>,
    y_next: Array1<f64>,
) -> Result<SolverState> {
    let z = momentum_update(sched.gamma, c.alpha, &x_next, &state.x);
    let h = momentum_update(sched.gamma, c.alpha, &y_next, &state.y);
    let mut next = SolverState { k: state.k + 1, x: x_next, y: y_next, lambda: Array1::zeros(0), z, h };
    let zd = next.z_delta(sched.delta, sched.gamma);
    let hd = next.h_delta(sched.delta, sched.gamma);
    let r = residual(p, &zd, &hd);
    let ab = c.alpha * c.beta;
    next.lambda = Array1::from_iter(state.lambda.iter().zip(&r).map(|(&l, &ri)| l + ab * ri));
    if !next.is_finite() {
        return Err(Error::Numerical { iteration: state.k, reason: "non-finite iterate".into() });
    }
    Ok(next)
}

/// `lambda - delta beta (A x + B y - b)`
fn dual_extrapolation(p: &ProblemInstance, s: &SolverState, c: &StepCoefficients) -> Array1<f64> {
    let r = residual(p, &s.x, &s.y);
    let db = c.delta * c.beta;
    Array1::from_iter(s.lambda.iter().zip(&r).map(|(&l, &ri)| l - db * ri))
}

/// One joint step: `(x, y)` are updated together.
pub fn step_joint(
    p: &ProblemInstance,
    sched: &ParameterSchedule,
    state: &SolverState,
    inner: &InnerConfig,
) -> Result<(SolverState, StepWorkspace)> {
    check_state(p, state)?;
    if p.is_single_block() {
        return step_single(p, sched, state, inner);
    }
    let c = coeffs_at(sched, state.k, p.mu_f(), p.mu_g())?;
    let lt = dual_extrapolation(p, state, &c);
    let xt = prox_center(&state.x, &state.z, sched.gamma, c.eta_f);
    let yt = prox_center(&state.y, &state.h, sched.gamma, c.eta_g);
    let q = assemble_joint(p, &c, &lt, &xt, &yt)?;
    let mut warm = Array1::zeros(p.nx() + p.ny());
    warm.slice_mut(ndarray::s![..p.nx()]).assign(&state.x);
    warm.slice_mut(ndarray::s![p.nx()..]).assign(&state.y);
    let sol = solve_composite(&q, &warm, inner.tol_at(state.k), inner.max_inner).map_err(|e| wrap_inner(state.k, e))?;
    let mut log = InnerLog::new();
    log.add(&sol);
    let (x1, y1) = split_blocks(&sol.u, p.nx());
    let next = finish(p, sched, state, c, x1, y1)?;
    let ws = StepWorkspace {
        coeffs: c,
        lambda_tilde: lt.clone(),
        lambda_tilde_1: lt.clone(),
        lambda_tilde_2: lt,
        lambda_bar: next.lambda.clone(),
        lambda_hat: next.lambda.clone(),
        x_tilde: xt,
        y_tilde: yt,
        inner_residual: log.residual,
        inner_iterations: log.iterations,
        inner_converged: log.converged,
        paths: log.paths,
    };
    Ok((next, ws))
}

/// Shared single-block step; also the joint and split steps when `y` is empty.
fn step_single(
    p: &ProblemInstance,
    sched: &ParameterSchedule,
    state: &SolverState,
    inner: &InnerConfig,
) -> Result<(SolverState, StepWorkspace)> {
    let c = coeffs_at(sched, state.k, p.mu_f(), p.mu_g())?;
    let lt = dual_extrapolation(p, state, &c);
    let xt = prox_center(&state.x, &state.z, sched.gamma, c.eta_f);
    let q = assemble_x_split(p, &c, &lt, &xt, &state.y)?;
    let sol = solve_composite(&q, &state.x, inner.tol_at(state.k), inner.max_inner).map_err(|e| wrap_inner(state.k, e))?;
    let mut log = InnerLog::new();
    log.add(&sol);
    let next = finish(p, sched, state, c, sol.u, Array1::zeros(0))?;
    let ws = StepWorkspace {
        coeffs: c,
        lambda_tilde: lt.clone(),
        lambda_tilde_1: lt.clone(),
        lambda_tilde_2: lt,
        lambda_bar: next.lambda.clone(),
        lambda_hat: next.lambda.clone(),
        x_tilde: xt,
        y_tilde: Array1::zeros(0),
        inner_residual: log.residual,
        inner_iterations: log.iterations,
        inner_converged: log.converged,
        paths: log.paths,
    };
    Ok((next, ws))
}

/// One splitting step: `x` against `y_k`, then `y` against `x_{k+1}`.
pub fn step_split(
    p: &ProblemInstance,
    sched: &ParameterSchedule,
    state: &SolverState,
    inner: &InnerConfig,
) -> Result<(SolverState, StepWorkspace)> {
    check_state(p, state)?;
    if p.is_single_block() {
        return step_single(p, sched, state, inner);
    }
    let c = coeffs_at(sched, state.k, p.mu_f(), p.mu_g())?;
    let ab = c.alpha * c.beta;
    let lt2 = dual_extrapolation(p, state, &c);
    // lambda_tilde_1 = lambda_tilde_2 + delta alpha beta B (H - gamma y)
    let hg = Array1::from_iter(state.h.iter().zip(&state.y).map(|(&h, &y)| h - sched.gamma * y));
    let bh = p.b_op.apply(&hg)?;
    let dab = c.delta * ab;
    let lt1 = Array1::from_iter(lt2.iter().zip(&bh).map(|(&l, &v)| l + dab * v));
    let tol = inner.tol_at(state.k);
    let mut log = InnerLog::new();

    let xt = prox_center(&state.x, &state.z, sched.gamma, c.eta_f);
    let qx = assemble_x_split(p, &c, &lt1, &xt, &state.y)?;
    let sx = solve_composite(&qx, &state.x, tol, inner.max_inner).map_err(|e| wrap_inner(state.k, e))?;
    log.add(&sx);
    let x1 = sx.u;

    let yt = prox_center(&state.y, &state.h, sched.gamma, c.eta_g);
    let qy = assemble_y_split(p, &c, &lt2, &yt, &x1)?;
    let sy = solve_composite(&qy, &state.y, tol, inner.max_inner).map_err(|e| wrap_inner(state.k, e))?;
    log.add(&sy);

    let next = finish(p, sched, state, c, x1, sy.u)?;
    // lambda_bar = lambda_k + alpha beta (A Z^d_{k+1} + B H^d_k - b)
    let r = residual(p, &next.z_delta(sched.delta, sched.gamma), &state.h_delta(sched.delta, sched.gamma));
    let lambda_bar = Array1::from_iter(state.lambda.iter().zip(&r).map(|(&l, &ri)| l + ab * ri));
    let ws = StepWorkspace {
        coeffs: c,
        lambda_tilde: lt2.clone(),
        lambda_tilde_1: lt1,
        lambda_tilde_2: lt2,
        lambda_bar,
        lambda_hat: next.lambda.clone(),
        x_tilde: xt,
        y_tilde: yt,
        inner_residual: log.residual,
        inner_iterations: log.iterations,
        inner_converged: log.converged,
        paths: log.paths,
    };
    Ok((next, ws))
}

/// Single-block step for `min f(x) s.t. A x = b`.
pub fn step_nonseparable(
    p: &ProblemInstance,
    sched: &ParameterSchedule,
    state: &SolverState,
    inner: &InnerConfig,
) -> Result<(SolverState, StepWorkspace)> {
    check_state(p, state)?;
    if !p.is_single_block() {
        return invalid(format!("single-block step needs an empty y block, got dimension {}", p.ny()));
    }
    step_single(p, sched, state, inner)
}

pub fn step(
    algorithm: Algorithm,
    p: &ProblemInstance,
    sched: &ParameterSchedule,
    state: &SolverState,
    inner: &InnerConfig,
) -> Result<(SolverState, StepWorkspace)> {
    match algorithm {
        Algorithm::Joint => step_joint(p, sched, state, inner),
        Algorithm::Split => step_split(p, sched, state, inner),
        Algorithm::Nonseparable => step_nonseparable(p, sched, state, inner),
    }
}

/// Residuals of the three discrete relations linking consecutive states:
///
/// * `dist(-(Z_{k+1} - Z_k)/(a b) - A^T lbar - eps x + mu_f (x - Z^d), df(x))`
/// * `dist(-(H_{k+1} - H_k)/(a b) - B^T lhat - eps y + mu_g (y - H^d), dg(y))`
/// * `|(lambda_{k+1} - lambda_k)/a - b (A Z^d + B H^d - b)|`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeResidual {
    pub x_inclusion: f64,
    pub y_inclusion: f64,
    pub multiplier: f64,
}

impl SchemeResidual {
    pub fn max(&self) -> f64 {
        self.x_inclusion.max(self.y_inclusion).max(self.multiplier)
    }
}

pub fn scheme_residual(
    p: &ProblemInstance,
    sched: &ParameterSchedule,
    prev: &SolverState,
    next: &SolverState,
    ws: &StepWorkspace,
) -> Result<SchemeResidual> {
    check_state(p, prev)?;
    check_state(p, next)?;
    let c = &ws.coeffs;
    let (d, g) = (sched.delta, sched.gamma);
    let ab = c.alpha * c.beta;
    let zd = next.z_delta(d, g);
    let hd = next.h_delta(d, g);

    let inclusion = |dz: Array1<f64>, lam: &Array1<f64>, op: &crate::model::LinearOperator, u: &Array1<f64>, ud: &Array1<f64>, mu: f64, f: &crate::model::ProxFunction| {
        let mut v = Array1::from_iter(dz.iter().zip(u).zip(ud).map(|((&dzi, &ui), &udi)| {
            -dzi / ab - c.epsilon * ui + mu * (ui - udi)
        }));
        op.adjoint_add(lam.as_slice().unwrap(), -1.0, v.as_slice_mut().unwrap());
        f.subgradient_distance(u.as_slice().unwrap(), v.as_slice().unwrap())
    };
    let x_inclusion = inclusion(&next.z - &prev.z, &ws.lambda_bar, &p.a, &next.x, &zd, p.mu_f(), &p.f);
    let y_inclusion = inclusion(&next.h - &prev.h, &ws.lambda_hat, &p.b_op, &next.y, &hd, p.mu_g(), &p.g);
    let r = residual(p, &zd, &hd);
    let m = Array1::from_iter(
        next.lambda
            .iter()
            .zip(&prev.lambda)
            .zip(&r)
            .map(|((&l1, &l0), &ri)| (l1 - l0) / c.alpha - c.beta * ri),
    );
    Ok(SchemeResidual { x_inclusion, y_inclusion, multiplier: norm(&m) })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_iter: usize,
    #[serde(default)]
    pub feas_tol: Option<f64>,
    /// Requires a saddle in the probe configuration.
    #[serde(default)]
    pub obj_tol: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Record every `stride`-th iterate, plus the first and last.
    pub stride: usize,
    pub saddle: Option<SaddlePoint>,
    /// Reference for `dist_to_point`; defaults to the saddle.
    pub reference: Option<(Array1<f64>, Array1<f64>)>,
    pub energy: bool,
    pub record_wall_time: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { stride: 1, saddle: None, reference: None, energy: false, record_wall_time: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIter,
    Feasibility,
    Objective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub trace: IterationTrace,
    pub state: SolverState,
    pub stop: StopReason,
    pub iterations: usize,
    pub max_inner_residual: f64,
    pub unconverged_inner: usize,
}

/// Runs `budget.max_iter` steps from `start`, sampling a trace row per stride.
pub fn run(
    algorithm: Algorithm,
    p: &ProblemInstance,
    sched: &ParameterSchedule,
    start: SolverState,
    budget: &Budget,
    probes: &ProbeConfig,
    inner: &InnerConfig,
) -> Result<RunResult> {
    check_state(p, &start)?;
    if probes.stride == 0 {
        return invalid("trace stride must be positive");
    }
    if budget.obj_tol.is_some() && probes.saddle.is_none() {
        return invalid("an objective tolerance needs a reference saddle");
    }
    let clock = Instant::now();
    let saddle = probes.saddle.as_ref();
    let reference = probes.reference.as_ref().map(|(x, y)| (x, y));
    let make_row = |s: &SolverState, inner_res: f64| -> Result<crate::diagnostics::TraceRow> {
        let mut row = residual_row(p, s, saddle, reference)?;
        row.inner_residual = inner_res;
        if probes.energy {
            if let Some(sd) = saddle {
                row.energy = Some(energy_at(p, sched, s, sd)?.total);
            }
        }
        if probes.record_wall_time {
            row.wall_ms = Some(clock.elapsed().as_secs_f64() * 1e3);
        }
        Ok(row)
    };
    let mut trace = IterationTrace::default();
    trace.rows.push(make_row(&start, 0.0)?);
    let mut state = start;
    let mut stop = StopReason::MaxIter;
    let mut max_inner_residual: f64 = 0.0;
    let mut unconverged_inner = 0;
    let mut done = 0;
    for it in 1..=budget.max_iter {
        let (next, ws) = step(algorithm, p, sched, &state, inner)?;
        state = next;
        done = it;
        max_inner_residual = max_inner_residual.max(ws.inner_residual);
        if !ws.inner_converged {
            unconverged_inner += 1;
        }
        let feas_hit = budget.feas_tol.is_some_and(|t| p.feasibility(&state.x, &state.y) <= t);
        let obj_hit = match (budget.obj_tol, saddle) {
            (Some(t), Some(s)) => (p.objective(&state.x, &state.y) - s.phi).abs() <= t,
            _ => false,
        };
        let last = it == budget.max_iter || feas_hit || obj_hit;
        if it % probes.stride == 0 || last {
            trace.rows.push(make_row(&state, ws.inner_residual)?);
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
    Ok(RunResult { trace, state, stop, iterations: done, max_inner_residual, unconverged_inner })
}
