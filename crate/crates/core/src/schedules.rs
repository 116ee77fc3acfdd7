//! Parameter sequences (gamma, delta, alpha_k, beta_k, epsilon_k), per-step
//! coefficients, and finite-horizon validators for the growth conditions.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const SLACK: f64 = 1e-12;

/// Tail log-log slope below which a series of positive terms is declared summable.
const SUMMABLE_SLOPE: f64 = -1.01;

/// A positive-integer-indexed real sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
pub enum SequenceFamily {
    /// `c * k^p`
    PowerLaw { c: f64, p: f64 },
    Constant { c: f64 },
    /// `c * k^2`
    ScaledSquare { c: f64 },
    /// Explicit values for `k = 1..=values.len()`, then the fallback family,
    /// or the last table value when no fallback is given.
    Custom {
        values: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fallback: Option<Box<SequenceFamily>>,
    },
}

impl SequenceFamily {
    pub fn power_law(c: f64, p: f64) -> Self {
        SequenceFamily::PowerLaw { c, p }
    }

    pub fn constant(c: f64) -> Self {
        SequenceFamily::Constant { c }
    }

    pub fn scaled_square(c: f64) -> Self {
        SequenceFamily::ScaledSquare { c }
    }

    pub fn eval(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(Error::Schedule { k, reason: "sequences are indexed from k = 1".into() });
        }
        let v = match self {
            SequenceFamily::PowerLaw { c, p } => {
                if *p == 0.0 {
                    *c
                } else {
                    c * (k as f64).powf(*p)
                }
            }
            SequenceFamily::Constant { c } => *c,
            SequenceFamily::ScaledSquare { c } => {
                let kf = k as f64;
                c * kf * kf
            }
            SequenceFamily::Custom { values, fallback } => {
                if k <= values.len() {
                    values[k - 1]
                } else if let Some(fb) = fallback {
                    return fb.eval(k);
                } else if let Some(last) = values.last() {
                    *last
                } else {
                    return Err(Error::Schedule { k, reason: "empty custom table without fallback".into() });
                }
            }
        };
        if !v.is_finite() {
            return Err(Error::Schedule { k, reason: format!("non-finite value {v}") });
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSchedule {
    pub gamma: f64,
    pub delta: f64,
    pub alpha: SequenceFamily,
    pub beta: SequenceFamily,
    pub epsilon: SequenceFamily,
}

/// Coefficients used by one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCoefficients {
    pub k: usize,
    pub gamma: f64,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// `(alpha + delta) * beta`
    pub theta: f64,
    /// `gamma + 1/alpha + mu_f * delta * beta`
    pub eta_f: f64,
    /// `gamma + 1/alpha + mu_g * delta * beta`
    pub eta_g: f64,
}

impl ParameterSchedule {
    pub fn new(
        gamma: f64,
        delta: f64,
        alpha: SequenceFamily,
        beta: SequenceFamily,
        epsilon: SequenceFamily,
    ) -> Result<Self> {
        let s = Self { gamma, delta, alpha, beta, epsilon };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return invalid(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return invalid(format!("delta must be positive, got {}", self.delta));
        }
        Ok(())
    }

    /// `gamma = 2, delta = 0.6, alpha_k = 1/k, beta_k = k, epsilon_k = 1/k^3`.
    pub fn linear() -> Self {
        Self {
            gamma: 2.0,
            delta: 0.6,
            alpha: SequenceFamily::power_law(1.0, -1.0),
            beta: SequenceFamily::power_law(1.0, 1.0),
            epsilon: SequenceFamily::power_law(1.0, -3.0),
        }
    }

    /// `gamma = 3.4, delta = 0.3, alpha_k = 1/k, beta_k = mu_g k^2 / (3 ||B||^2)`,
    /// `epsilon_k = 1 / (alpha_k beta_k k^3)`.
    pub fn quadratic(mu_g: f64, norm_b: f64) -> Result<Self> {
        if !(mu_g > 0.0) || !(norm_b > 0.0) {
            return invalid(format!(
                "quadratic schedule needs mu_g > 0 and ||B|| > 0, got mu_g={mu_g}, ||B||={norm_b}"
            ));
        }
        let c = mu_g / (3.0 * norm_b * norm_b);
        Ok(Self {
            gamma: 3.4,
            delta: 0.3,
            alpha: SequenceFamily::power_law(1.0, -1.0),
            beta: SequenceFamily::scaled_square(c),
            epsilon: SequenceFamily::power_law(1.0 / c, -4.0),
        })
    }

    /// `gamma = 2, delta = 0.7, alpha_k = 1/k, beta_k = k, epsilon_k = 1/sqrt(k)`.
    pub fn linear_strong() -> Self {
        Self {
            gamma: 2.0,
            delta: 0.7,
            alpha: SequenceFamily::power_law(1.0, -1.0),
            beta: SequenceFamily::power_law(1.0, 1.0),
            epsilon: SequenceFamily::power_law(1.0, -0.5),
        }
    }

    pub fn with_epsilon(mut self, epsilon: SequenceFamily) -> Self {
        self.epsilon = epsilon;
        self
    }

    fn triple(&self, k: usize) -> Result<(f64, f64, f64)> {
        Ok((self.alpha.eval(k)?, self.beta.eval(k)?, self.epsilon.eval(k)?))
    }
}

pub fn coeffs_at(s: &ParameterSchedule, k: usize, mu_f: f64, mu_g: f64) -> Result<StepCoefficients> {
    if k == 0 {
        return Err(Error::Schedule { k, reason: "k must be at least 1".into() });
    }
    let (alpha, beta, epsilon) = s.triple(k)?;
    if !(alpha > 0.0) {
        return Err(Error::Schedule { k, reason: format!("alpha_k = {alpha} is not positive") });
    }
    if !(beta > 0.0) {
        return Err(Error::Schedule { k, reason: format!("beta_k = {beta} is not positive") });
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Schedule { k, reason: format!("epsilon_k = {epsilon} is negative") });
    }
    let theta = (alpha + s.delta) * beta;
    let eta_f = s.gamma + 1.0 / alpha + mu_f * s.delta * beta;
    let eta_g = s.gamma + 1.0 / alpha + mu_g * s.delta * beta;
    Ok(StepCoefficients {
        k,
        gamma: s.gamma,
        delta: s.delta,
        alpha,
        beta,
        epsilon,
        theta,
        eta_f,
        eta_g,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Evaluation,
    DeltaGamma,
    BetaNondecreasing,
    BetaGrowth,
    CouplingGrowth,
    EpsilonNonnegative,
    EpsilonNonincreasing,
    WeightedEpsilonSummable,
    AlphaEpsilonSummable,
    BetaEpsilonDivergent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub condition: Condition,
    pub first_k: Option<usize>,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Summable,
    Divergent,
}

/// Finite-horizon evidence about an infinite series of nonnegative terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesEvidence {
    pub name: String,
    pub partial_sum: f64,
    /// Least-squares slope of `ln t_k` against `ln k` over `k in [K/2, K]`.
    pub tail_slope: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonMode {
    Rate,
    Strong,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub horizon: usize,
    pub violations: Vec<Violation>,
    pub series: Vec<SeriesEvidence>,
    pub notes: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, condition: Condition) -> bool {
        self.violations.iter().any(|v| v.condition == condition)
    }

    pub fn merge(&mut self, other: ValidationReport) {
        for v in other.violations {
            if !self.has(v.condition) {
                self.violations.push(v);
            }
        }
        self.series.extend(other.series);
        for n in other.notes {
            if !self.notes.contains(&n) {
                self.notes.push(n);
            }
        }
    }

    fn violate(&mut self, condition: Condition, first_k: Option<usize>, detail: String) {
        if !self.has(condition) {
            self.violations.push(Violation { condition, first_k, detail });
        }
    }
}

fn check_horizon(k: usize) -> Result<()> {
    if k < 2 {
        return invalid(format!("validation horizon must be at least 2, got {k}"));
    }
    Ok(())
}

/// Evaluates `(alpha_k, beta_k, epsilon_k)` for `k = 1..=horizon`, recording the
/// first evaluation failure and truncating there.
fn tabulate(s: &ParameterSchedule, horizon: usize, report: &mut ValidationReport) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        match s.triple(k) {
            Ok(t) => out.push(t),
            Err(e) => {
                report.violate(Condition::Evaluation, Some(k), e.to_string());
                break;
            }
        }
    }
    out
}

/// `delta*gamma >= 1`, beta nondecreasing, `delta beta_{k+1} <= delta beta_k + alpha_k beta_k`.
pub fn validate_assumption1(s: &ParameterSchedule, horizon: usize) -> Result<ValidationReport> {
    check_horizon(horizon)?;
    s.check()?;
    let mut report = ValidationReport { horizon, ..Default::default() };
    let dg = s.delta * s.gamma - 1.0;
    if dg < -SLACK {
        report.violate(Condition::DeltaGamma, None, format!("delta*gamma - 1 = {dg}"));
    }
    if s.delta > 1.0 {
        report
            .notes
            .push(format!("delta = {} exceeds 1; the linear-rate setting assumes delta <= 1", s.delta));
    }
    let table = tabulate(s, horizon, &mut report);
    for (i, pair) in table.windows(2).enumerate() {
        let k = i + 1;
        let (a0, b0, _) = pair[0];
        let (_, b1, _) = pair[1];
        if b0 <= 0.0 || a0 <= 0.0 {
            report.violate(Condition::Evaluation, Some(k), format!("alpha_k={a0}, beta_k={b0} must be positive"));
        }
        if b1 < b0 - SLACK {
            report.violate(Condition::BetaNondecreasing, Some(k), format!("beta_{} = {b1} < beta_{k} = {b0}", k + 1));
        }
        let gap = s.delta * b1 - s.delta * b0 - a0 * b0;
        if gap > SLACK {
            report.violate(
                Condition::BetaGrowth,
                Some(k),
                format!("delta*beta_(k+1) - delta*beta_k - alpha_k*beta_k = {gap:e} at k={k}"),
            );
        }
    }
    Ok(report)
}

/// The base step-size checks plus `||B||^2 (a_{k+1}^2 b_{k+1}^2 - a_k^2 b_k^2) <= a_k b_k mu_g`.
pub fn validate_assumption2(
    s: &ParameterSchedule,
    norm_b: f64,
    mu_g: f64,
    horizon: usize,
) -> Result<ValidationReport> {
    if !(norm_b >= 0.0) || !(mu_g >= 0.0) {
        return invalid(format!("||B|| and mu_g must be nonnegative, got {norm_b}, {mu_g}"));
    }
    let mut report = validate_assumption1(s, horizon)?;
    let mut scratch = ValidationReport::default();
    let table = tabulate(s, horizon, &mut scratch);
    let nb2 = norm_b * norm_b;
    for (i, pair) in table.windows(2).enumerate() {
        let k = i + 1;
        let ab0 = pair[0].0 * pair[0].1;
        let ab1 = pair[1].0 * pair[1].1;
        let lhs = nb2 * (ab1 * ab1 - ab0 * ab0);
        let rhs = ab0 * mu_g;
        if lhs - rhs > SLACK {
            report.violate(Condition::CouplingGrowth, Some(k), format!("lhs {lhs:e} exceeds rhs {rhs:e} at k={k}"));
        }
    }
    Ok(report)
}

/// Summability evidence for the nonnegative series `terms[k-1] = t_k`.
pub fn series_evidence(name: &str, terms: &[f64]) -> SeriesEvidence {
    let partial_sum: f64 = terms.iter().sum();
    let n = terms.len();
    let lo = (n / 2).max(1);
    let (mut sx, mut sy, mut sxx, mut sxy, mut cnt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut all_zero = true;
    let mut any_zero = false;
    for k in lo..=n {
        let t = terms[k - 1];
        if t > 0.0 {
            all_zero = false;
            let x = (k as f64).ln();
            let y = t.ln();
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
            cnt += 1.0;
        } else {
            any_zero = true;
        }
    }
    let (tail_slope, verdict) = if all_zero {
        (f64::NEG_INFINITY, Verdict::Summable)
    } else if cnt < 2.0 {
        // a single positive tail term amid zeros
        (f64::NEG_INFINITY, if any_zero { Verdict::Summable } else { Verdict::Divergent })
    } else {
        let den = cnt * sxx - sx * sx;
        let slope = if den > 0.0 { (cnt * sxy - sx * sy) / den } else { 0.0 };
        (slope, if slope < SUMMABLE_SLOPE { Verdict::Summable } else { Verdict::Divergent })
    };
    SeriesEvidence { name: name.to_string(), partial_sum, tail_slope, verdict }
}

/// Rate mode: epsilon nonincreasing and `sum alpha_k beta_k epsilon_k < inf`.
/// Strong mode: epsilon nonincreasing, `sum alpha_k epsilon_k < inf` and
/// `beta_k epsilon_k -> inf`; the weighted sum is reported for information.
pub fn validate_epsilon_conditions(
    s: &ParameterSchedule,
    horizon: usize,
    mode: EpsilonMode,
) -> Result<ValidationReport> {
    check_horizon(horizon)?;
    let mut report = ValidationReport { horizon, ..Default::default() };
    let table = tabulate(s, horizon, &mut report);
    if table.len() < horizon {
        return Ok(report);
    }
    for (k, &(_, _, e)) in table.iter().enumerate() {
        if e < 0.0 {
            report.violate(Condition::EpsilonNonnegative, Some(k + 1), format!("epsilon_k = {e}"));
        }
    }
    for (i, pair) in table.windows(2).enumerate() {
        if pair[1].2 > pair[0].2 + SLACK {
            report.violate(
                Condition::EpsilonNonincreasing,
                Some(i + 1),
                format!("epsilon_{} = {} > epsilon_{} = {}", i + 2, pair[1].2, i + 1, pair[0].2),
            );
        }
    }
    let weighted: Vec<f64> = table.iter().map(|&(a, b, e)| a * b * e).collect();
    let weighted_ev = series_evidence("alpha*beta*epsilon", &weighted);
    let half = horizon / 2;
    let be_half = table[half - 1].1 * table[half - 1].2;
    let be_end = table[horizon - 1].1 * table[horizon - 1].2;
    match mode {
        EpsilonMode::Rate => {
            if weighted_ev.verdict == Verdict::Divergent {
                report.violate(
                    Condition::WeightedEpsilonSummable,
                    None,
                    format!(
                        "partial sum {:.6e} with tail slope {:.3}",
                        weighted_ev.partial_sum, weighted_ev.tail_slope
                    ),
                );
            }
            if be_end <= be_half {
                report
                    .notes
                    .push("beta_k*epsilon_k does not grow; strong-convergence conditions are not met".into());
            }
        }
        EpsilonMode::Strong => {
            let ae: Vec<f64> = table.iter().map(|&(a, _, e)| a * e).collect();
            let ae_ev = series_evidence("alpha*epsilon", &ae);
            if ae_ev.verdict == Verdict::Divergent {
                report.violate(
                    Condition::AlphaEpsilonSummable,
                    None,
                    format!("partial sum {:.6e} with tail slope {:.3}", ae_ev.partial_sum, ae_ev.tail_slope),
                );
            }
            if !(be_end > be_half) {
                report.violate(
                    Condition::BetaEpsilonDivergent,
                    Some(horizon),
                    format!("beta_K*epsilon_K = {be_end:e} does not exceed beta_(K/2)*epsilon_(K/2) = {be_half:e}"),
                );
            }
            if weighted_ev.verdict == Verdict::Divergent {
                report
                    .notes
                    .push("sum alpha_k*beta_k*epsilon_k appears divergent; rate-mode conditions are not met".into());
            }
            report.series.push(ae_ev);
        }
    }
    report.series.insert(0, weighted_ev);
    Ok(report)
}
