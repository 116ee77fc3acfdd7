//! Energy function, per-iterate residuals, one-step energy checks and rate fits.

use std::io::{Read, Write};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ProblemInstance, SaddlePoint};
use crate::schedules::{coeffs_at, ParameterSchedule};
use crate::solvers::{Algorithm, SolverState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub i1: f64,
    pub i2: f64,
    pub i3: f64,
    pub i4: f64,
    pub total: f64,
}

/// `E_k = I1 + I2 + I3 + I4` at `state`, with the schedule evaluated at `state.k`:
///
/// * `I1 = delta^2 beta_k (L(x, y, l*) - L(x*, y*, l*) + eps_k/2 (|x|^2 + |y|^2))`
/// * `I2 = 1/2 |Z^d - x*|^2 + 1/2 |H^d - y*|^2`
/// * `I3 = (delta gamma - 1)/2 (|x - x*|^2 + |y - y*|^2)`
/// * `I4 = delta/2 |lambda - l*|^2`
pub fn energy_at(
    p: &ProblemInstance,
    sched: &ParameterSchedule,
    state: &SolverState,
    saddle: &SaddlePoint,
) -> Result<EnergyBreakdown> {
    let c = coeffs_at(sched, state.k, p.mu_f(), p.mu_g())?;
    let (d, g) = (sched.delta, sched.gamma);
    let gap = p.lagrangian_value(&state.x, &state.y, &saddle.lambda)?
        - p.lagrangian_value(&saddle.x, &saddle.y, &saddle.lambda)?;
    let sq = |v: &Array1<f64>| v.dot(v);
    let i1 = d * d * c.beta * (gap + 0.5 * c.epsilon * (sq(&state.x) + sq(&state.y)));
    let i2 = 0.5 * sq(&(state.z_delta(d, g) - &saddle.x)) + 0.5 * sq(&(state.h_delta(d, g) - &saddle.y));
    let i3 = 0.5 * (d * g - 1.0) * (sq(&(&state.x - &saddle.x)) + sq(&(&state.y - &saddle.y)));
    let i4 = 0.5 * d * sq(&(&state.lambda - &saddle.lambda));
    Ok(EnergyBreakdown { i1, i2, i3, i4, total: i1 + i2 + i3 + i4 })
}

/// `E_k`, plus `delta alpha_k^2 beta_k^2 / 2 |B (H^d_k - y*)|^2` for the split algorithm.
pub fn lyapunov_value(
    p: &ProblemInstance,
    sched: &ParameterSchedule,
    state: &SolverState,
    saddle: &SaddlePoint,
    algorithm: Algorithm,
) -> Result<f64> {
    let e = energy_at(p, sched, state, saddle)?.total;
    if algorithm != Algorithm::Split {
        return Ok(e);
    }
    let c = coeffs_at(sched, state.k, p.mu_f(), p.mu_g())?;
    let hd = state.h_delta(sched.delta, sched.gamma) - &saddle.y;
    let bh = p.b_op.apply(&hd)?;
    let ab = c.alpha * c.beta;
    Ok(e + 0.5 * sched.delta * ab * ab * bh.dot(&bh))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyCheck {
    pub passed: bool,
    /// Lyapunov increase `V_{k+1} - V_k`.
    pub increase: f64,
    /// `delta alpha_k beta_k eps_k / 2 (|x*|^2 + |y*|^2)`.
    pub bound: f64,
    pub slack: f64,
    /// `bound + slack - increase`; negative on failure.
    pub margin: f64,
}

/// Checks `V_{k+1} - V_k <= delta alpha_k beta_k eps_k / 2 (|x*|^2 + |y*|^2) + slack`
/// with `slack = 1e-9 max(1, e_ref) + 10 inner_residual (1 + |state|)`.
#[allow(clippy::too_many_arguments)]
pub fn check_energy_step(
    p: &ProblemInstance,
    sched: &ParameterSchedule,
    prev: &SolverState,
    next: &SolverState,
    saddle: &SaddlePoint,
    algorithm: Algorithm,
    inner_residual: f64,
    e_ref: f64,
) -> Result<EnergyCheck> {
    let v0 = lyapunov_value(p, sched, prev, saddle, algorithm)?;
    let v1 = lyapunov_value(p, sched, next, saddle, algorithm)?;
    let c = coeffs_at(sched, prev.k, p.mu_f(), p.mu_g())?;
    let bound = 0.5 * sched.delta * c.alpha * c.beta * c.epsilon * (saddle.x.dot(&saddle.x) + saddle.y.dot(&saddle.y));
    let state_norm = (next.x.dot(&next.x) + next.y.dot(&next.y) + next.lambda.dot(&next.lambda)).sqrt();
    let slack = 1e-9 * e_ref.max(1.0) + 10.0 * inner_residual * (1.0 + state_norm);
    let increase = v1 - v0;
    let margin = bound + slack - increase;
    Ok(EnergyCheck { passed: margin >= 0.0, increase, bound, slack, margin })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    /// `|Phi(x_k, y_k) - Phi*|`
    pub objective_residual: Option<f64>,
    /// `|A x_k + B y_k - b|`
    pub feasibility: f64,
    /// `L(x_k, y_k, l*) - L(x*, y*, l*)`, clamped at zero.
    pub lagrangian_gap: Option<f64>,
    #[serde(skip)]
    pub gap_clamped: bool,
    pub iterate_norm: f64,
    pub dist_to_point: Option<f64>,
    pub energy: Option<f64>,
    pub inner_residual: f64,
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceField {
    ObjectiveResidual,
    Feasibility,
    LagrangianGap,
    IterateNorm,
    DistToPoint,
    Energy,
    InnerResidual,
}

impl TraceField {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "objective_residual" => TraceField::ObjectiveResidual,
            "feasibility" => TraceField::Feasibility,
            "lagrangian_gap" => TraceField::LagrangianGap,
            "iterate_norm" => TraceField::IterateNorm,
            "dist_to_point" => TraceField::DistToPoint,
            "energy" => TraceField::Energy,
            "inner_residual" => TraceField::InnerResidual,
            _ => return None,
        })
    }
}

impl TraceRow {
    pub fn get(&self, field: TraceField) -> Option<f64> {
        match field {
            TraceField::ObjectiveResidual => self.objective_residual,
            TraceField::Feasibility => Some(self.feasibility),
            TraceField::LagrangianGap => self.lagrangian_gap,
            TraceField::IterateNorm => Some(self.iterate_norm),
            TraceField::DistToPoint => self.dist_to_point,
            TraceField::Energy => self.energy,
            TraceField::InnerResidual => Some(self.inner_residual),
        }
    }
}

/// Residual fields at `state`. Saddle-dependent fields are `None` without a saddle;
/// `point` overrides the saddle as the reference for `dist_to_point`.
pub fn residual_row(
    p: &ProblemInstance,
    state: &SolverState,
    saddle: Option<&SaddlePoint>,
    point: Option<(&Array1<f64>, &Array1<f64>)>,
) -> Result<TraceRow> {
    p.check_point(&state.x, &state.y)?;
    let feasibility = p.feasibility(&state.x, &state.y);
    let iterate_norm = (state.x.dot(&state.x) + state.y.dot(&state.y)).sqrt();
    let mut row = TraceRow {
        k: state.k,
        objective_residual: None,
        feasibility,
        lagrangian_gap: None,
        gap_clamped: false,
        iterate_norm,
        dist_to_point: None,
        energy: None,
        inner_residual: 0.0,
        wall_ms: None,
    };
    if let Some(s) = saddle {
        row.objective_residual = Some((p.objective(&state.x, &state.y) - s.phi).abs());
        let gap = p.lagrangian_value(&state.x, &state.y, &s.lambda)? - p.lagrangian_value(&s.x, &s.y, &s.lambda)?;
        row.gap_clamped = gap < 0.0;
        row.lagrangian_gap = Some(gap.max(0.0));
    }
    let reference = point.or(saddle.map(|s| (&s.x, &s.y)));
    if let Some((xr, yr)) = reference {
        p.check_point(xr, yr)?;
        let dx = &state.x - xr;
        let dy = &state.y - yr;
        row.dist_to_point = Some((dx.dot(&dx) + dy.dot(&dy)).sqrt());
    }
    Ok(row)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: [&str; 9] = [
    "k",
    "objective_residual",
    "feasibility",
    "lagrangian_gap",
    "iterate_norm",
    "dist_to_point",
    "energy",
    "inner_residual",
    "wall_ms",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str, line: usize, col: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|e| Error::Config {
        location: format!("row {line}, column {col}"),
        reason: e.to_string(),
    })
}

impl IterationTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(TRACE_HEADER)?;
        for r in &self.rows {
            wr.write_record([
                r.k.to_string(),
                fmt_opt(r.objective_residual),
                r.feasibility.to_string(),
                fmt_opt(r.lagrangian_gap),
                r.iterate_norm.to_string(),
                fmt_opt(r.dist_to_point),
                fmt_opt(r.energy),
                r.inner_residual.to_string(),
                fmt_opt(r.wall_ms),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != TRACE_HEADER {
            return Err(Error::Config { location: "header".into(), reason: format!("unexpected columns {header:?}") });
        }
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let get = |j: usize| rec.get(j).unwrap_or("");
            let req = |j: usize| -> Result<f64> {
                parse_opt(get(j), line, TRACE_HEADER[j])?.ok_or_else(|| Error::Config {
                    location: format!("row {line}, column {}", TRACE_HEADER[j]),
                    reason: "missing value".into(),
                })
            };
            let k = get(0).parse::<usize>().map_err(|e| Error::Config {
                location: format!("row {line}, column k"),
                reason: e.to_string(),
            })?;
            let lagrangian_gap = parse_opt(get(3), line, TRACE_HEADER[3])?;
            rows.push(TraceRow {
                k,
                objective_residual: parse_opt(get(1), line, TRACE_HEADER[1])?,
                feasibility: req(2)?,
                lagrangian_gap,
                gap_clamped: false,
                iterate_norm: req(4)?,
                dist_to_point: parse_opt(get(5), line, TRACE_HEADER[5])?,
                energy: parse_opt(get(6), line, TRACE_HEADER[6])?,
                inner_residual: req(7)?,
                wall_ms: parse_opt(get(8), line, TRACE_HEADER[8])?,
            });
        }
        Ok(Self { rows })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Least-squares slope of `ln field` against `ln k` over `k_lo <= k <= k_hi`.
/// Rows with a missing or nonpositive value are skipped.
pub fn fit_rate(trace: &IterationTrace, field: TraceField, k_lo: usize, k_hi: usize) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = trace
        .rows
        .iter()
        .filter(|r| r.k >= k_lo.max(1) && r.k <= k_hi)
        .filter_map(|r| r.get(field).filter(|v| *v > 0.0 && v.is_finite()).map(|v| ((r.k as f64).ln(), v.ln())))
        .collect();
    if pts.len() < 10 {
        return Err(Error::InsufficientData { usable: pts.len(), needed: 10 });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &pts {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::InsufficientData { usable: 1, needed: 10 });
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(RateFit { slope, r_squared, points: pts.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearOperator, ProxFunction};
    use crate::solvers::init_state;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn case_one() -> (ProblemInstance, SaddlePoint) {
        let p = ProblemInstance::new(
            ProxFunction::shifted_l1(1.0, vec![2.0; 3]).unwrap(),
            ProxFunction::l1(3.0, 3).unwrap(),
            LinearOperator::identity(3),
            LinearOperator::diagonal(array![-2.0, -3.0, -1.0]),
            Array1::zeros(3),
        )
        .unwrap();
        let s = SaddlePoint { x: Array1::zeros(3), y: Array1::zeros(3), lambda: array![1.0, 1.0, 1.0], phi: 6.0 };
        (p, s)
    }

    fn saddle_state(p: &ProblemInstance, sched: &ParameterSchedule, s: &SaddlePoint, k: usize) -> SolverState {
        let mut st = init_state(p, sched, &s.x, &s.y, &s.lambda).unwrap();
        st.k = k;
        st
    }

    /// Nonzero saddle: f = 1/2 |x|^2, g = 1/2 |y|^2, x + y = 2 gives x* = y* = 1, l* = -1.
    fn quadratic_pair() -> (ProblemInstance, SaddlePoint) {
        let p = ProblemInstance::new(
            ProxFunction::squared_l2(1.0, 1).unwrap(),
            ProxFunction::squared_l2(1.0, 1).unwrap(),
            LinearOperator::identity(1),
            LinearOperator::identity(1),
            array![2.0],
        )
        .unwrap();
        let s = SaddlePoint { x: array![1.0], y: array![1.0], lambda: array![-1.0], phi: 1.0 };
        assert_eq!(p.kkt_residual(&s).unwrap(), 0.0);
        (p, s)
    }

    #[test]
    fn energy_vanishes_at_saddle_without_tikhonov() {
        let (p, s) = case_one();
        let sched = ParameterSchedule::linear().with_epsilon(crate::schedules::SequenceFamily::constant(0.0));
        let e = energy_at(&p, &sched, &saddle_state(&p, &sched, &s, 4), &s).unwrap();
        assert_eq!((e.i1, e.i2, e.i3, e.i4, e.total), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn tikhonov_term_isolated_at_saddle() {
        let (p, s) = quadratic_pair();
        let sched = ParameterSchedule::linear();
        let e = energy_at(&p, &sched, &saddle_state(&p, &sched, &s, 2), &s).unwrap();
        let (d, beta, eps) = (0.6, 2.0, 0.125);
        assert!((e.i1 - d * d * beta * (eps / 2.0) * 2.0).abs() < 1e-15);
        assert_eq!((e.i2, e.i3, e.i4), (0.0, 0.0, 0.0));
    }

    /// Straight-line re-evaluation with scalar loops.
    fn energy_oracle(p: &ProblemInstance, sched: &ParameterSchedule, st: &SolverState, s: &SaddlePoint) -> f64 {
        let (d, g) = (sched.delta, sched.gamma);
        let k = st.k as f64;
        let beta = k;
        let eps = 1.0 / (k * k * k);
        let l = |x: &Array1<f64>, y: &Array1<f64>| {
            let mut v = p.f.value(x.as_slice().unwrap()) + p.g.value(y.as_slice().unwrap());
            let ad = p.a.to_dense();
            let bd = p.b_op.to_dense();
            for i in 0..p.m() {
                let mut r = -p.rhs[i];
                for j in 0..x.len() {
                    r += ad[[i, j]] * x[j];
                }
                for j in 0..y.len() {
                    r += bd[[i, j]] * y[j];
                }
                v += s.lambda[i] * r;
            }
            v
        };
        let mut nx2 = 0.0;
        let mut i2 = 0.0;
        let mut i3 = 0.0;
        for j in 0..st.x.len() {
            nx2 += st.x[j] * st.x[j];
            let zd = d * st.z[j] + (1.0 - d * g) * st.x[j];
            i2 += 0.5 * (zd - s.x[j]).powi(2);
            i3 += 0.5 * (d * g - 1.0) * (st.x[j] - s.x[j]).powi(2);
        }
        for j in 0..st.y.len() {
            nx2 += st.y[j] * st.y[j];
            let hd = d * st.h[j] + (1.0 - d * g) * st.y[j];
            i2 += 0.5 * (hd - s.y[j]).powi(2);
            i3 += 0.5 * (d * g - 1.0) * (st.y[j] - s.y[j]).powi(2);
        }
        let mut i4 = 0.0;
        for j in 0..st.lambda.len() {
            i4 += 0.5 * d * (st.lambda[j] - s.lambda[j]).powi(2);
        }
        let i1 = d * d * beta * (l(&st.x, &st.y) - l(&s.x, &s.y) + 0.5 * eps * nx2);
        i1 + i2 + i3 + i4
    }

    #[test]
    fn energy_matches_oracle_on_random_states() {
        let (p, s) = case_one();
        let sched = ParameterSchedule::linear();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let r = |rng: &mut ChaCha8Rng| -> Array1<f64> { (0..3).map(|_| rng.random_range(-2.0..2.0)).collect() };
            let st = SolverState {
                k: rng.random_range(1..50),
                x: r(&mut rng),
                y: r(&mut rng),
                lambda: r(&mut rng),
                z: r(&mut rng),
                h: r(&mut rng),
            };
            let e = energy_at(&p, &sched, &st, &s).unwrap();
            let o = energy_oracle(&p, &sched, &st, &s);
            assert!((e.total - o).abs() <= 1e-12 * (1.0 + o.abs()), "{} vs {o}", e.total);
            assert!(e.i2 >= 0.0 && e.i4 >= 0.0 && e.i3 >= 0.0);
            assert!(e.total >= -1e-10);
        }
    }

    #[test]
    fn energy_check_at_saddle() {
        let (p, s) = quadratic_pair();
        let sched = ParameterSchedule::linear();
        let a = saddle_state(&p, &sched, &s, 3);
        let b = saddle_state(&p, &sched, &s, 4);
        for alg in [Algorithm::Joint, Algorithm::Split] {
            let c = check_energy_step(&p, &sched, &a, &b, &s, alg, 0.0, 1.0).unwrap();
            assert!(c.passed, "{c:?}");
            assert!(c.bound > 0.0);
        }
    }

    #[test]
    fn split_lyapunov_adds_coupling_term() {
        let (p, s) = quadratic_pair();
        let sched = ParameterSchedule::linear();
        let mut st = saddle_state(&p, &sched, &s, 2);
        st.h = array![3.0];
        // H^d - y* = 0.6*3 + (1-1.2)*1 - 1 = 0.6; alpha*beta = 1
        let plain = lyapunov_value(&p, &sched, &st, &s, Algorithm::Joint).unwrap();
        let aug = lyapunov_value(&p, &sched, &st, &s, Algorithm::Split).unwrap();
        assert!((aug - plain - 0.5 * 0.6 * 0.36).abs() < 1e-14);
    }

    #[test]
    fn rows_at_saddle_are_zero() {
        let (p, s) = case_one();
        let sched = ParameterSchedule::linear();
        let row = residual_row(&p, &saddle_state(&p, &sched, &s, 1), Some(&s), None).unwrap();
        assert_eq!(row.objective_residual, Some(0.0));
        assert_eq!(row.feasibility, 0.0);
        assert_eq!(row.lagrangian_gap, Some(0.0));
        assert_eq!(row.dist_to_point, Some(0.0));
        assert!(!row.gap_clamped);
    }

    #[test]
    fn feasible_non_optimal_row() {
        let (p, s) = case_one();
        let sched = ParameterSchedule::linear();
        let mut st = saddle_state(&p, &sched, &s, 1);
        st.y = array![0.5, 0.0, 0.0];
        st.x = array![1.0, 0.0, 0.0];
        let row = residual_row(&p, &st, Some(&s), None).unwrap();
        assert_eq!(row.feasibility, 0.0);
        // |1-2| + 2 + 2 + 3*0.5 = 6.5
        assert_eq!(row.objective_residual, Some(0.5));
        assert!((row.iterate_norm - 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rows_without_saddle_leave_fields_empty() {
        let (p, s) = case_one();
        let sched = ParameterSchedule::linear();
        let row = residual_row(&p, &saddle_state(&p, &sched, &s, 1), None, None).unwrap();
        assert!(row.objective_residual.is_none() && row.lagrangian_gap.is_none() && row.dist_to_point.is_none());
    }

    #[test]
    fn negative_gap_is_clamped_and_flagged() {
        let (p, _) = case_one();
        let sched = ParameterSchedule::linear();
        // wrong multiplier: zero is not a dual solution, so the gap can go negative
        let bogus = SaddlePoint { x: Array1::zeros(3), y: Array1::zeros(3), lambda: Array1::zeros(3), phi: 6.0 };
        let mut st = saddle_state(&p, &sched, &bogus, 1);
        st.x = array![2.0, 2.0, 2.0];
        let row = residual_row(&p, &st, Some(&bogus), None).unwrap();
        assert_eq!(row.lagrangian_gap, Some(0.0));
        assert!(row.gap_clamped);
    }

    fn synthetic(f: impl Fn(f64) -> f64) -> IterationTrace {
        IterationTrace {
            rows: (1..=1000)
                .map(|k| TraceRow {
                    k,
                    objective_residual: Some(f(k as f64)),
                    feasibility: f(k as f64),
                    lagrangian_gap: None,
                    gap_clamped: false,
                    iterate_norm: 1.0,
                    dist_to_point: None,
                    energy: None,
                    inner_residual: 0.0,
                    wall_ms: None,
                })
                .collect(),
        }
    }

    #[test]
    fn rate_fits_on_power_laws() {
        let t = synthetic(|k| 1.0 / k);
        let f = fit_rate(&t, TraceField::Feasibility, 10, 1000).unwrap();
        assert!((f.slope + 1.0).abs() <= 0.01 && f.r_squared >= 0.999);
        let t = synthetic(|k| 1.0 / (k * k));
        let f = fit_rate(&t, TraceField::ObjectiveResidual, 10, 1000).unwrap();
        assert!((f.slope + 2.0).abs() <= 0.01);
        let t = synthetic(|_| 3.0);
        let f = fit_rate(&t, TraceField::Feasibility, 10, 1000).unwrap();
        assert!(f.slope.abs() <= 0.01);
    }

    #[test]
    fn rate_fit_needs_ten_points() {
        let t = synthetic(|k| 1.0 / k);
        assert!(matches!(
            fit_rate(&t, TraceField::Feasibility, 1, 9),
            Err(Error::InsufficientData { usable: 9, needed: 10 })
        ));
        assert!(matches!(fit_rate(&t, TraceField::Energy, 1, 1000), Err(Error::InsufficientData { usable: 0, .. })));
        let mut t = synthetic(|k| 1.0 / k);
        for r in t.rows.iter_mut().take(995) {
            r.feasibility = 0.0;
        }
        assert!(fit_rate(&t, TraceField::Feasibility, 1, 1000).is_err());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let mut t = synthetic(|k| 1.0 / k);
        t.rows.truncate(3);
        t.rows[1].wall_ms = Some(1.5);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "k,objective_residual,feasibility,lagrangian_gap,iterate_norm,dist_to_point,energy,inner_residual,wall_ms\n"
        ));
        assert!(text.contains("\n1,1,1,,1,,,0,\n"));
        let back = IterationTrace::read_csv(&buf[..]).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn fitted_slope_recovers_exponent(p in -3.0f64..1.0, c in 0.01f64..100.0) {
            let t = synthetic(|k| c * k.powf(p));
            let f = fit_rate(&t, TraceField::Feasibility, 20, 1000).unwrap();
            prop_assert!((f.slope - p).abs() < 1e-9);
        }
    }
}
