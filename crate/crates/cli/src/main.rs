use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pdsplit::diagnostics::{fit_rate, IterationTrace, TraceField};
use pdsplit::experiments::{instance_seed, run_experiment, ExperimentConfig, Method, RunOptions};
use pdsplit::schedules::{
    validate_assumption1, validate_assumption2, validate_epsilon_conditions, EpsilonMode, ValidationReport,
};
use pdsplit::solvers::Algorithm;
use pdsplit::{Error, ProblemInstance};

/// Accelerated primal-dual splitting experiments.
#[derive(Parser)]
#[command(name = "pdsplit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (instance, algorithm) cell of a config and write CSVs plus summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Record wall-clock time per row (CSV bytes then vary between runs).
        #[arg(long)]
        wall_time: bool,
    },
    /// Check the schedules of a config against the step-size conditions.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        horizon: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a log-log slope to one column of a trace CSV.
    Rate {
        csv: PathBuf,
        #[arg(long)]
        field: String,
        #[arg(long, default_value_t = 1)]
        from: usize,
        #[arg(long, default_value_t = usize::MAX)]
        to: usize,
    },
    /// Write each generated instance of a config as a JSON document.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::from_path(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn cmd_run(config: &Path, out: Option<PathBuf>, threads: usize, seed: Option<u64>, wall_time: bool) -> ExitCode {
    let cfg = match load(config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let opts = RunOptions { out_dir: out, threads, seed, wall_time };
    match run_experiment(&cfg, &opts) {
        Ok(summary) => {
            for c in &summary.cells {
                match &c.error {
                    None => eprintln!("done {} / {}: {} iterations", c.instance, c.label, c.iterations),
                    Some(e) => eprintln!("FAILED {} / {}: {e}", c.instance, c.label),
                }
            }
            if summary.failed_cells() > 0 {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn print_report(name: &str, r: &ValidationReport) {
    println!("{name}: {}", if r.passed() { "pass" } else { "FAIL" });
    for v in &r.violations {
        match v.first_k {
            Some(k) => println!("  violated {:?} at k={k}: {}", v.condition, v.detail),
            None => println!("  violated {:?}: {}", v.condition, v.detail),
        }
    }
    for s in &r.series {
        println!("  series {}: partial sum {:.6e}, tail slope {:.3}, {:?}", s.name, s.partial_sum, s.tail_slope, s.verdict);
    }
    for n in &r.notes {
        println!("  note: {n}");
    }
}

fn cmd_validate(config: &Path, horizon: usize, seed: Option<u64>) -> ExitCode {
    let cfg = match load(config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let seed = seed.unwrap_or(cfg.seed);
    let mut instances = Vec::new();
    for (i, spec) in cfg.instances.iter().enumerate() {
        match spec.generate(instance_seed(seed, i)) {
            Ok(g) => instances.push((spec.name.clone(), g)),
            Err(e) => {
                eprintln!("error: instances[{i}]: {e}");
                return ExitCode::from(2);
            }
        }
    }
    let mut all_pass = true;
    let mut checked = 0;
    for (j, alg) in cfg.algorithms.iter().enumerate() {
        let Some(Method::Primal(a)) = Method::parse(&alg.name) else { continue };
        let Some(spec) = &alg.schedule else { continue };
        let targets: Vec<_> = instances
            .iter()
            .filter(|(n, _)| alg.instances.as_ref().is_none_or(|l| l.contains(n)))
            .collect();
        let check = |p: Option<&ProblemInstance>, eps: Option<&pdsplit::schedules::SequenceFamily>| -> pdsplit::Result<ValidationReport> {
            let mut sched = match p {
                Some(p) => spec.resolve(p)?,
                None => match spec {
                    pdsplit::experiments::ScheduleSpec::Explicit(s) => s.clone(),
                    pdsplit::experiments::ScheduleSpec::Preset { .. } => {
                        return Err(Error::Config {
                            location: format!("algorithms[{j}].schedule"),
                            reason: "a preset needs an instance to resolve".into(),
                        })
                    }
                },
            };
            if let Some(e) = eps {
                sched = sched.with_epsilon(e.clone());
            }
            let mut r = match (a, p) {
                (Algorithm::Split, Some(p)) => validate_assumption2(&sched, p.b_op.operator_norm(), p.mu_g(), horizon)?,
                _ => validate_assumption1(&sched, horizon)?,
            };
            // without a declared mode, either set of Tikhonov conditions is accepted
            let modes = match alg.epsilon_mode {
                Some(m) => vec![m],
                None => vec![EpsilonMode::Rate, EpsilonMode::Strong],
            };
            let reports: Vec<ValidationReport> =
                modes.iter().map(|&m| validate_epsilon_conditions(&sched, horizon, m)).collect::<pdsplit::Result<_>>()?;
            let chosen = reports.iter().position(|r| r.passed()).unwrap_or(0);
            if alg.epsilon_mode.is_none() {
                r.notes.push(format!("epsilon conditions checked in {:?} mode", modes[chosen]).to_lowercase());
            }
            r.merge(reports[chosen].clone());
            Ok(r)
        };
        let runs: Vec<(String, pdsplit::Result<ValidationReport>)> = if targets.is_empty() {
            vec![(alg.label().to_string(), check(None, None))]
        } else {
            targets
                .iter()
                .map(|(n, g)| (format!("{} on {n}", alg.label()), check(Some(&g.problem), g.epsilon_override.as_ref())))
                .collect()
        };
        for (name, r) in runs {
            checked += 1;
            match r {
                Ok(r) => {
                    all_pass &= r.passed();
                    print_report(&name, &r);
                }
                Err(e) => {
                    all_pass = false;
                    println!("{name}: FAIL ({e})");
                }
            }
        }
    }
    println!("{checked} schedule checks, {}", if all_pass { "all pass" } else { "failures present" });
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_rate(csv: &Path, field: &str, from: usize, to: usize) -> ExitCode {
    let Some(f) = TraceField::parse(field) else {
        eprintln!("error: unknown field {field:?}");
        return ExitCode::from(2);
    };
    let trace = match std::fs::File::open(csv).map_err(Error::from).and_then(IterationTrace::read_csv) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", csv.display());
            return ExitCode::from(2);
        }
    };
    match fit_rate(&trace, f, from, to) {
        Ok(fit) => {
            println!("slope {:.6} r2 {:.6} points {}", fit.slope, fit.r_squared, fit.points);
            ExitCode::SUCCESS
        }
        Err(e @ Error::InsufficientData { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn cmd_gen(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> ExitCode {
    let cfg = match load(config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let seed = seed.unwrap_or(cfg.seed);
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    if let Err(e) = std::fs::create_dir_all(&dir) {
        eprintln!("error: {}: {e}", dir.display());
        return ExitCode::from(2);
    }
    for (i, spec) in cfg.instances.iter().enumerate() {
        let written = spec.generate(instance_seed(seed, i)).and_then(|g| {
            let path = dir.join(format!("{}.json", spec.name));
            let text = serde_json::to_string_pretty(&g.problem)?;
            std::fs::write(&path, text)?;
            Ok(path)
        });
        match written {
            Ok(path) => eprintln!("wrote {}", path.display()),
            Err(e) => {
                eprintln!("error: instances[{i}]: {e}");
                return ExitCode::from(2);
            }
        }
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, threads, seed, wall_time } => cmd_run(&config, out, threads, seed, wall_time),
        Command::Validate { config, horizon, seed } => cmd_validate(&config, horizon, seed),
        Command::Rate { csv, field, from, to } => cmd_rate(&csv, &field, from, to),
        Command::Gen { config, out, seed } => cmd_gen(&config, out, seed),
    }
}
