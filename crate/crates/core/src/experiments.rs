//! Instance generators and the experiment runner.
//!
//! A run takes an [`ExperimentConfig`] (a JSON document), generates every
//! instance, optionally computes an ADMM oracle per instance, then runs each
//! (instance, algorithm) cell independently and writes one CSV per cell plus
//! `summary.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    reference_solution_with, run_baseline, BaselineConfig, BaselineMethod, BaselineState, ReferenceOptions,
};
use crate::diagnostics::{fit_rate, IterationTrace, RateFit, TraceField, TraceRow};
use crate::error::{invalid, Error, Result};
use crate::model::{LinearOperator, ProblemInstance, ProxFunction, SaddlePoint};
use crate::schedules::{
    validate_assumption1, validate_assumption2, validate_epsilon_conditions, EpsilonMode, ParameterSchedule,
    SequenceFamily, ValidationReport,
};
use crate::solvers::{init_state, run, Algorithm, Budget, InnerConfig, ProbeConfig, RunResult, StopReason};

pub const CORRELATED_NOTE: &str = "correlated columns: a random half of the columns j is replaced by col_j' + 0.1 * N(0, 1) for a random partner j' outside that half, before row normalization";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadConfig {
    pub m: usize,
    pub n: usize,
    pub lambda_l1: f64,
    #[serde(default)]
    pub mu_l2: f64,
    pub density: f64,
    pub noise_var: f64,
    #[serde(default)]
    pub correlated: bool,
    /// Filled from the experiment seed when the instance entry gives none.
    #[serde(default)]
    pub seed: u64,
}

impl LadConfig {
    /// Desk-scale defaults: (60, 600), 10% support, noise variance 1e-4.
    pub fn desk(lambda_l1: f64, mu_l2: f64, seed: u64) -> Self {
        Self { m: 60, n: 600, lambda_l1, mu_l2, density: 0.1, noise_var: 1e-4, correlated: false, seed }
    }

    fn check(&self) -> Result<()> {
        if self.m == 0 || self.m >= self.n {
            return invalid(format!("need 0 < m < n, got m={} n={}", self.m, self.n));
        }
        if !(self.lambda_l1 > 0.0 && self.lambda_l1.is_finite()) {
            return invalid("lambda_l1 must be positive");
        }
        if !(self.mu_l2 >= 0.0 && self.mu_l2.is_finite()) {
            return invalid("mu_l2 must be nonnegative");
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return invalid("density must lie in (0, 1]");
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return invalid("noise_var must be positive");
        }
        Ok(())
    }
}

/// Builds `min g(y) + |x - b|_1  s.t.  x - M y = 0` with `x` in R^m and `y` in R^n.
/// Returns the instance and the planted sparse vector.
pub fn gen_lad_instance(cfg: &LadConfig) -> Result<(ProblemInstance, Array1<f64>)> {
    cfg.check()?;
    let (m, n) = (cfg.m, cfg.n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mat = Array2::<f64>::from_shape_simple_fn((m, n), || StandardNormal.sample(&mut rng));
    if cfg.correlated {
        let mut cols: Vec<usize> = (0..n).collect();
        cols.shuffle(&mut rng);
        let (targets, partners) = cols.split_at(n / 2);
        for &j in targets {
            let jp = partners[rng.random_range(0..partners.len())];
            for i in 0..m {
                let noise: f64 = StandardNormal.sample(&mut rng);
                mat[[i, j]] = mat[[i, jp]] + 0.1 * noise;
            }
        }
    }
    for mut row in mat.rows_mut() {
        let nr = row.dot(&row).sqrt();
        row /= nr;
    }
    let support = (cfg.density * n as f64).ceil() as usize;
    let mut truth = Array1::<f64>::zeros(n);
    for j in index::sample(&mut rng, n, support.min(n)).into_iter() {
        truth[j] = StandardNormal.sample(&mut rng);
    }
    let noise = Normal::new(0.0, cfg.noise_var.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut b = mat.dot(&truth);
    b.mapv_inplace(|v| v + noise.sample(&mut rng));
    let g = if cfg.mu_l2 > 0.0 {
        ProxFunction::elastic_net(cfg.lambda_l1, cfg.mu_l2, n)?
    } else {
        ProxFunction::l1(cfg.lambda_l1, n)?
    };
    let p = ProblemInstance::new(
        ProxFunction::shifted_l1(1.0, b.to_vec())?,
        g,
        LinearOperator::identity(m),
        LinearOperator::dense(-mat),
        Array1::zeros(m),
    )?;
    Ok((p, truth))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum L1L1Epsilon {
    /// `epsilon = 0`
    None,
    /// `epsilon_k = c k^(-exponent)`
    Strong { c: f64, exponent: f64 },
}

impl L1L1Epsilon {
    pub fn family(&self) -> SequenceFamily {
        match *self {
            L1L1Epsilon::None => SequenceFamily::constant(0.0),
            L1L1Epsilon::Strong { c, exponent } => SequenceFamily::power_law(c, -exponent),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L1L1Config {
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub lambda_l1: f64,
    pub d: f64,
    /// Overrides the Tikhonov sequence of every schedule run on this instance.
    #[serde(default)]
    pub epsilon_mode: Option<L1L1Epsilon>,
}

impl L1L1Config {
    pub fn case_one() -> Self {
        Self { p: 2.0, q: 3.0, r: 1.0, lambda_l1: 3.0, d: 2.0, epsilon_mode: None }
    }

    pub fn case_two() -> Self {
        Self { p: 1.0, q: 1.0, r: 2.0, lambda_l1: 2.0, d: 2.0, epsilon_mode: None }
    }
}

/// `min lambda |y|_1 + |x - (d, d, d)|_1  s.t.  x - diag(p, q, r) y = 0`.
pub fn gen_l1l1_instance(cfg: &L1L1Config) -> Result<ProblemInstance> {
    let diag = [cfg.p, cfg.q, cfg.r];
    if diag.iter().any(|&v| v == 0.0 || !v.is_finite()) {
        return invalid(format!("diagonal entries must be finite and nonzero, got {diag:?}"));
    }
    if !(cfg.lambda_l1 > 0.0) || !cfg.d.is_finite() {
        return invalid("lambda_l1 must be positive and d finite");
    }
    ProblemInstance::new(
        ProxFunction::shifted_l1(1.0, vec![cfg.d; 3])?,
        ProxFunction::l1(cfg.lambda_l1, 3)?,
        LinearOperator::identity(3),
        LinearOperator::diagonal(Array1::from(diag.map(|v| -v).to_vec())),
        Array1::zeros(3),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum InstanceSource {
    Lad(LadConfig),
    L1l1(L1L1Config),
    Inline { problem: ProblemInstance },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSpec {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub name: String,
    /// Generator seed; derived from the experiment seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Target of `dist_to_point`; the oracle point when absent.
    #[serde(default)]
    pub reference_point: Option<PointSpec>,
    #[serde(flatten)]
    pub source: InstanceSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedInstance {
    pub problem: ProblemInstance,
    pub ground_truth: Option<Array1<f64>>,
    pub seed: Option<u64>,
    pub epsilon_override: Option<SequenceFamily>,
    pub notes: Vec<String>,
}

impl InstanceSpec {
    pub fn generate(&self, derived_seed: u64) -> Result<GeneratedInstance> {
        match &self.source {
            InstanceSource::Lad(cfg) => {
                let seed = self.seed.unwrap_or(derived_seed);
                let cfg = LadConfig { seed, ..cfg.clone() };
                let (problem, truth) = gen_lad_instance(&cfg)?;
                let notes = if cfg.correlated { vec![CORRELATED_NOTE.to_string()] } else { Vec::new() };
                Ok(GeneratedInstance { problem, ground_truth: Some(truth), seed: Some(seed), epsilon_override: None, notes })
            }
            InstanceSource::L1l1(cfg) => Ok(GeneratedInstance {
                problem: gen_l1l1_instance(cfg)?,
                ground_truth: None,
                seed: None,
                epsilon_override: cfg.epsilon_mode.map(|e| e.family()),
                notes: Vec::new(),
            }),
            InstanceSource::Inline { problem } => Ok(GeneratedInstance {
                problem: problem.clone(),
                ground_truth: None,
                seed: None,
                epsilon_override: None,
                notes: Vec::new(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `gamma = 2, delta = 0.6, alpha = 1/k, beta = k, epsilon = 1/k^3`
    Linear,
    /// `beta_k = mu_g k^2 / (3 |B|^2)`, from the instance
    Quadratic,
    /// `gamma = 2, delta = 0.7, alpha = 1/k, beta = k, epsilon = 1/sqrt(k)`
    LinearStrong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Preset {
        preset: Preset,
        #[serde(default)]
        epsilon: Option<SequenceFamily>,
    },
    Explicit(ParameterSchedule),
}

impl ScheduleSpec {
    pub fn resolve(&self, p: &ProblemInstance) -> Result<ParameterSchedule> {
        match self {
            ScheduleSpec::Explicit(s) => {
                s.check()?;
                Ok(s.clone())
            }
            ScheduleSpec::Preset { preset, epsilon } => {
                let s = match preset {
                    Preset::Linear => ParameterSchedule::linear(),
                    Preset::Quadratic => ParameterSchedule::quadratic(p.mu_g(), p.b_op.operator_norm())?,
                    Preset::LinearStrong => ParameterSchedule::linear_strong(),
                };
                Ok(match epsilon {
                    Some(e) => s.with_epsilon(e.clone()),
                    None => s,
                })
            }
        }
    }
}

fn default_rho() -> f64 {
    1.0
}

fn default_theta() -> f64 {
    1.0
}

fn default_gamma_cp() -> f64 {
    0.999
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_gamma_cp")]
    pub gamma_cp: f64,
    #[serde(default)]
    pub prox_x: f64,
    #[serde(default)]
    pub prox_y: f64,
}

impl BaselineParams {
    pub fn with_method(&self, method: BaselineMethod) -> BaselineConfig {
        BaselineConfig {
            method,
            rho: self.rho,
            tau: self.tau,
            theta: self.theta,
            gamma_cp: self.gamma_cp,
            prox_x: self.prox_x,
            prox_y: self.prox_y,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSpec {
    #[default]
    Zeros,
    Explicit { x: Vec<f64>, y: Vec<f64>, lambda: Vec<f64> },
    /// `x = b - B y` (needs `A = I`); `lambda` defaults to zero.
    FromY {
        y: Vec<f64>,
        #[serde(default)]
        lambda: Option<Vec<f64>>,
    },
    /// Independent `N(0, scale^2)` entries drawn from the cell seed.
    Random { scale: f64 },
}

type Point = (Array1<f64>, Array1<f64>, Array1<f64>);

impl InitSpec {
    pub fn point(&self, p: &ProblemInstance, seed: u64) -> Result<Point> {
        let (nx, ny, m) = (p.nx(), p.ny(), p.m());
        Ok(match self {
            InitSpec::Zeros => (Array1::zeros(nx), Array1::zeros(ny), Array1::zeros(m)),
            InitSpec::Explicit { x, y, lambda } => (
                Array1::from(x.clone()),
                Array1::from(y.clone()),
                Array1::from(lambda.clone()),
            ),
            InitSpec::FromY { y, lambda } => {
                if !matches!(p.a.kind(), crate::model::OperatorKind::Identity(_)) {
                    return invalid("init from y needs A = identity");
                }
                let y = Array1::from(y.clone());
                if y.len() != ny {
                    return invalid(format!("init y: expected length {ny}, got {}", y.len()));
                }
                let mut x = p.rhs.clone();
                p.b_op.apply_add(y.as_slice().unwrap(), -1.0, x.as_slice_mut().unwrap());
                let lambda = lambda.clone().map(Array1::from).unwrap_or_else(|| Array1::zeros(m));
                (x, y, lambda)
            }
            InitSpec::Random { scale } => {
                if !(*scale >= 0.0 && scale.is_finite()) {
                    return invalid("init scale must be nonnegative");
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut draw = |n: usize| -> Array1<f64> {
                    (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect()
                };
                let x = draw(nx);
                let y = draw(ny);
                let l = draw(m);
                (x, y, l)
            }
        })
    }
}

fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    /// One of joint, split, nonseparable, admm, cp, cp_scvx.
    pub name: String,
    /// File-name label; defaults to `name`.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default)]
    pub baseline: Option<BaselineParams>,
    pub budget: Budget,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub inner: Option<InnerConfig>,
    #[serde(default)]
    pub init: InitSpec,
    /// Record the energy column (needs a converged oracle).
    #[serde(default)]
    pub energy: bool,
    /// Which Tikhonov conditions to validate; none skips that check.
    #[serde(default)]
    pub epsilon_mode: Option<EpsilonMode>,
    /// Rate-fit window; defaults to `[K/100, K]`.
    #[serde(default)]
    pub rate_window: Option<(usize, usize)>,
    /// Restrict the entry to these instance names; all when absent.
    #[serde(default)]
    pub instances: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Primal(Algorithm),
    Baseline(BaselineMethod),
}

impl Method {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "joint" => Method::Primal(Algorithm::Joint),
            "split" => Method::Primal(Algorithm::Split),
            "nonseparable" => Method::Primal(Algorithm::Nonseparable),
            "admm" => Method::Baseline(BaselineMethod::Admm),
            "cp" => Method::Baseline(BaselineMethod::Cp),
            "cp_scvx" => Method::Baseline(BaselineMethod::CpScvx),
            _ => return None,
        })
    }
}

impl AlgorithmSpec {
    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub instances: Vec<InstanceSpec>,
    #[serde(default)]
    pub algorithms: Vec<AlgorithmSpec>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// KKT tolerance of the ADMM oracle; no oracle when absent.
    #[serde(default)]
    pub oracle_tol: Option<f64>,
    #[serde(default)]
    pub oracle_max_iter: Option<usize>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn config_err(location: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config { location: location.into(), reason: reason.into() }
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the offending location.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| config_err(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::HashSet::new();
        for (i, inst) in self.instances.iter().enumerate() {
            if !valid_label(&inst.name) {
                return Err(config_err(format!("instances[{i}].name"), format!("invalid name {:?}", inst.name)));
            }
            if !names.insert(inst.name.as_str()) {
                return Err(config_err(format!("instances[{i}].name"), format!("duplicate name {:?}", inst.name)));
            }
        }
        let mut labels = std::collections::HashSet::new();
        for (j, alg) in self.algorithms.iter().enumerate() {
            let at = |field: &str| format!("algorithms[{j}].{field}");
            let method = Method::parse(&alg.name)
                .ok_or_else(|| config_err(at("name"), format!("unknown algorithm {:?}", alg.name)))?;
            match method {
                Method::Primal(_) if alg.schedule.is_none() => {
                    return Err(config_err(at("schedule"), format!("{} needs a schedule", alg.name)));
                }
                Method::Baseline(_) if alg.baseline.is_none() => {
                    return Err(config_err(at("baseline"), format!("{} needs a baseline config", alg.name)));
                }
                _ => {}
            }
            if !valid_label(alg.label()) {
                return Err(config_err(at("label"), format!("invalid label {:?}", alg.label())));
            }
            if !labels.insert(alg.label()) {
                return Err(config_err(at("label"), format!("duplicate label {:?}", alg.label())));
            }
            if alg.stride == 0 {
                return Err(config_err(at("stride"), "stride must be positive"));
            }
            if let Some(list) = &alg.instances {
                if let Some(bad) = list.iter().find(|n| !names.contains(n.as_str())) {
                    return Err(config_err(at("instances"), format!("unknown instance {bad:?}")));
                }
            }
        }
        if let Some(t) = self.oracle_tol {
            if !(t > 0.0) {
                return Err(config_err("oracle_tol", "must be positive"));
            }
        }
        Ok(())
    }
}

fn valid_label(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

/// Counted splitting of the experiment seed: stream `s`, counter `i` map
/// through a SplitMix64 finalizer.
pub fn split_seed(master: u64, stream: u64, counter: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const INSTANCE_STREAM: u64 = 1;
const CELL_STREAM: u64 = 2;

/// Generator seed of the `i`-th instance entry.
pub fn instance_seed(master: u64, i: usize) -> u64 {
    split_seed(master, INSTANCE_STREAM, i as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub kkt_residual: f64,
    pub phi: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub name: String,
    pub seed: Option<u64>,
    pub nx: usize,
    pub ny: usize,
    pub m: usize,
    pub oracle: Option<OracleSummary>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeSummary {
    pub field: TraceField,
    pub window: (usize, usize),
    pub fit: Option<RateFit>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub instance: String,
    pub algorithm: String,
    pub label: String,
    pub seed: u64,
    pub status: CellStatus,
    pub error: Option<String>,
    pub csv: Option<String>,
    pub iterations: usize,
    pub stop: Option<StopReason>,
    pub final_row: Option<TraceRow>,
    pub final_objective: Option<f64>,
    pub slopes: Vec<SlopeSummary>,
    pub validation: Option<ValidationReport>,
    pub max_inner_residual: f64,
    pub unconverged_inner: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub instances: Vec<InstanceSummary>,
    pub cells: Vec<CellSummary>,
}

impl ExperimentSummary {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.status == CellStatus::Failed).count()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunOptions {
    /// Overrides `output_dir`.
    pub out_dir: Option<PathBuf>,
    /// Cap on concurrent cells; 0 or 1 runs sequentially.
    pub threads: usize,
    /// Overrides the config seed.
    pub seed: Option<u64>,
    /// Records wall-clock milliseconds (makes CSVs nondeterministic).
    pub wall_time: bool,
}

struct Prepared {
    spec: InstanceSpec,
    gen: GeneratedInstance,
    oracle: Option<crate::baselines::Reference>,
}

/// Everything one cell produced; the CSV is written by the caller.
pub struct CellOutcome {
    pub summary: CellSummary,
    pub result: Option<RunResult>,
}

/// Runs a single cell in memory. Randomness comes only from `seed`.
pub fn run_cell(
    alg: &AlgorithmSpec,
    problem: &ProblemInstance,
    epsilon_override: Option<&SequenceFamily>,
    oracle: Option<&SaddlePoint>,
    reference: Option<(Array1<f64>, Array1<f64>)>,
    seed: u64,
    wall_time: bool,
) -> Result<(RunResult, Option<ValidationReport>)> {
    let method = Method::parse(&alg.name).ok_or_else(|| config_err("name", format!("unknown algorithm {:?}", alg.name)))?;
    let (x0, y0, l0) = alg.init.point(problem, seed)?;
    let probes = ProbeConfig {
        stride: alg.stride,
        saddle: oracle.cloned(),
        reference,
        energy: alg.energy && oracle.is_some(),
        record_wall_time: wall_time,
    };
    let inner = alg.inner.unwrap_or_default();
    match method {
        Method::Primal(a) => {
            let spec = alg.schedule.as_ref().ok_or_else(|| config_err("schedule", "missing"))?;
            let mut sched = spec.resolve(problem)?;
            if let Some(e) = epsilon_override {
                sched = sched.with_epsilon(e.clone());
            }
            let horizon = alg.budget.max_iter.max(2);
            let mut report = if a == Algorithm::Split {
                validate_assumption2(&sched, problem.b_op.operator_norm(), problem.mu_g(), horizon)?
            } else {
                validate_assumption1(&sched, horizon)?
            };
            if let Some(mode) = alg.epsilon_mode {
                report.merge(validate_epsilon_conditions(&sched, horizon, mode)?);
            }
            let start = init_state(problem, &sched, &x0, &y0, &l0)?;
            let res = run(a, problem, &sched, start, &alg.budget, &probes, &inner)?;
            Ok((res, Some(report)))
        }
        Method::Baseline(m) => {
            let params = alg.baseline.as_ref().ok_or_else(|| config_err("baseline", "missing"))?;
            let rb = params.with_method(m).resolve(problem)?;
            let start = BaselineState::new(problem, &rb, &x0, &y0, &l0)?;
            let (res, _) = run_baseline(problem, &rb, start, &alg.budget, &probes, &inner)?;
            Ok((res, None))
        }
    }
}

fn slopes(trace: &IterationTrace, window: (usize, usize)) -> Vec<SlopeSummary> {
    [TraceField::Feasibility, TraceField::ObjectiveResidual, TraceField::DistToPoint]
        .into_iter()
        .map(|field| match fit_rate(trace, field, window.0, window.1) {
            Ok(fit) => SlopeSummary { field, window, fit: Some(fit), error: None },
            Err(e) => SlopeSummary { field, window, fit: None, error: Some(e.to_string()) },
        })
        .collect()
}

pub fn cell_file_name(instance: &str, label: &str) -> String {
    format!("{instance}__{label}.csv")
}

fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Prepared>> {
    cfg.instances
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let gen = spec
                .generate(instance_seed(seed, i))
                .map_err(|e| config_err(format!("instances[{i}]"), e.to_string()))?;
            let oracle = match cfg.oracle_tol {
                Some(tol) => {
                    let mut opts = ReferenceOptions::default();
                    if let Some(cap) = cfg.oracle_max_iter {
                        opts.max_iter = cap;
                    }
                    Some(reference_solution_with(&gen.problem, tol, &opts)?)
                }
                None => None,
            };
            Ok(Prepared { spec: spec.clone(), gen, oracle })
        })
        .collect()
}

/// Generates instances, runs every cell and writes CSVs and `summary.json`.
/// Cell failures are recorded in the summary; only setup errors are returned.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let seed = opts.seed.unwrap_or(cfg.seed);
    let out = opts.out_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let prepared = pool.install(|| prepare(cfg, seed))?;

    let n_alg = cfg.algorithms.len();
    let cells: Vec<(usize, usize)> = (0..prepared.len())
        .flat_map(|i| (0..n_alg).map(move |j| (i, j)))
        .filter(|&(i, j)| {
            cfg.algorithms[j].instances.as_ref().is_none_or(|l| l.iter().any(|n| *n == prepared[i].spec.name))
        })
        .collect();

    let summaries: Vec<CellSummary> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(i, j)| {
                let pr = &prepared[i];
                let alg = &cfg.algorithms[j];
                let cell_seed = split_seed(seed, CELL_STREAM, (i * n_alg + j) as u64);
                let saddle = pr.oracle.as_ref().map(|o| o.saddle.clone());
                let reference = match &pr.spec.reference_point {
                    Some(pt) => Some((Array1::from(pt.x.clone()), Array1::from(pt.y.clone()))),
                    None => None,
                };
                let mut summary = CellSummary {
                    instance: pr.spec.name.clone(),
                    algorithm: alg.name.clone(),
                    label: alg.label().to_string(),
                    seed: cell_seed,
                    status: CellStatus::Failed,
                    error: None,
                    csv: None,
                    iterations: 0,
                    stop: None,
                    final_row: None,
                    final_objective: None,
                    slopes: Vec::new(),
                    validation: None,
                    max_inner_residual: 0.0,
                    unconverged_inner: 0,
                };
                let outcome = run_cell(
                    alg,
                    &pr.gen.problem,
                    pr.gen.epsilon_override.as_ref(),
                    saddle.as_ref(),
                    reference,
                    cell_seed,
                    opts.wall_time,
                )
                .and_then(|(res, report)| {
                    let name = cell_file_name(&pr.spec.name, alg.label());
                    let file = fs::File::create(out.join(&name))?;
                    res.trace.write_csv(std::io::BufWriter::new(file))?;
                    Ok((res, report, name))
                });
                match outcome {
                    Ok((res, report, name)) => {
                        let k_hi = res.trace.last().map_or(1, |r| r.k);
                        let window = alg.rate_window.unwrap_or(((k_hi / 100).max(1), k_hi));
                        summary.status = CellStatus::Ok;
                        summary.csv = Some(name);
                        summary.iterations = res.iterations;
                        summary.stop = Some(res.stop);
                        summary.final_row = res.trace.last().cloned();
                        summary.final_objective = Some(pr.gen.problem.objective(&res.state.x, &res.state.y));
                        summary.slopes = slopes(&res.trace, window);
                        summary.validation = report;
                        summary.max_inner_residual = res.max_inner_residual;
                        summary.unconverged_inner = res.unconverged_inner;
                    }
                    Err(e) => summary.error = Some(e.to_string()),
                }
                summary
            })
            .collect()
    });

    let instances = prepared
        .iter()
        .map(|pr| InstanceSummary {
            name: pr.spec.name.clone(),
            seed: pr.gen.seed,
            nx: pr.gen.problem.nx(),
            ny: pr.gen.problem.ny(),
            m: pr.gen.problem.m(),
            oracle: pr.oracle.as_ref().map(|o| OracleSummary {
                kkt_residual: o.kkt_residual,
                phi: o.saddle.phi,
                iterations: o.iterations,
                converged: o.converged,
            }),
            notes: pr.gen.notes.clone(),
        })
        .collect();
    let summary = ExperimentSummary { seed, output_dir: out.clone(), instances, cells: summaries };
    let file = fs::File::create(out.join("summary.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &summary)?;
    Ok(summary)
}
