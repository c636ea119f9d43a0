//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation failure, 2 numerical or verification
//! failure, 3 I/O, schema or usage failure.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::io::{
    estimate_from_returns, load_problem, spec_from_market, write_atomic, Mode, PerturbationBlock,
    ProblemSpec, ReturnsTable, RunReport, SolutionBlock, Status, ValidationBlock,
};
use crate::model::{validate_market, DEFAULT_ELLIPTICITY_FLOOR};
use crate::optimizer::{
    capm_constrained_investable, capm_constrained_noninvestable, check_perturbations, kkt_oracle,
    merton_optimal, ClosedForm, ConstraintSpec, FormulaCheck, Solution, MATCH_TOLERANCE,
};
use crate::simulator::{estimate_expected_utility, simulate_terminal, verify_optimality, Scheme};

/// Random feasible perturbations used by `verify` to probe the oracle.
const ORACLE_PERTURBATIONS: usize = 1000;

#[derive(Debug, Parser)]
#[command(
    name = "relwealth",
    version,
    about = "Optimal portfolios under power utility of absolute and benchmark-relative wealth"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the market model only.
    Validate(RunArgs),
    /// Unconstrained optimum with benchmarks.
    Optimize(RunArgs),
    /// Beta-constrained CAPM optimum with closed-form diagnostics.
    Capm(RunArgs),
    /// Monte Carlo expected utility for given (or optimal) weights.
    Simulate(RunArgs),
    /// Closed form vs oracle vs Monte Carlo.
    Verify(RunArgs),
    /// Estimate a market model from a CSV of returns.
    Estimate(EstimateArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Problem file (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// exact | euler
    #[arg(long)]
    scheme: Option<String>,
    /// Closed-form vs oracle match tolerance.
    #[arg(long, default_value_t = MATCH_TOLERANCE)]
    tolerance: f64,
    /// Worker threads for simulation; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// CSV of simple per-period returns with a header row.
    #[arg(long)]
    returns: PathBuf,
    /// Period length in years (1/12 for monthly data).
    #[arg(long)]
    dt: f64,
    #[arg(long = "risk-free")]
    risk_free: f64,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Estimate(args) => estimate(args),
        Command::Validate(args) => finish(&args, validate(&args)?),
        Command::Optimize(args) => finish(&args, optimize(&args)?),
        Command::Capm(args) => finish(&args, capm(&args)?),
        Command::Simulate(args) => finish(&args, simulate(&args)?),
        Command::Verify(args) => finish(&args, verify(&args)?),
    }
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn finish(args: &RunArgs, (report, code): (RunReport, i32)) -> Result<i32> {
    emit(args.out.as_ref(), &report.to_json()?)?;
    Ok(code)
}

/// Loads the problem file and folds command-line overrides into its simulation
/// section so the echoed spec reproduces the run.
fn load(args: &RunArgs, with_simulation: bool) -> Result<ProblemSpec> {
    let mut spec = load_problem(&args.spec)?;
    let overridden = args.seed.is_some()
        || args.paths.is_some()
        || args.steps.is_some()
        || args.scheme.is_some();
    if with_simulation || overridden {
        let mut sim = spec.simulation_or_default();
        if let Some(seed) = args.seed {
            sim.seed = seed;
        }
        if let Some(paths) = args.paths {
            sim.paths = paths;
        }
        if let Some(steps) = args.steps {
            sim.steps = steps;
        }
        if let Some(scheme) = &args.scheme {
            sim.scheme = scheme.parse::<Scheme>()?;
        }
        spec.simulation = Some(sim);
        spec.validate()?;
    }
    Ok(spec)
}

fn seed_of(spec: &ProblemSpec) -> u64 {
    spec.simulation_or_default().seed
}

fn validate(args: &RunArgs) -> Result<(RunReport, i32)> {
    let spec = load(args, false)?;
    let mut report = RunReport::new("validate", seed_of(&spec), spec.clone());
    let result = match spec.mode {
        Mode::Merton => validate_market(&spec.market_model()?, DEFAULT_ELLIPTICITY_FLOOR),
        Mode::CapmInvestable | Mode::CapmNoninvestable => {
            let capm = spec.capm_model()?.expect("validated capm section");
            let base = capm.validate(DEFAULT_ELLIPTICITY_FLOOR);
            if base.ok {
                match spec.market_model() {
                    Ok(m) => validate_market(&m, DEFAULT_ELLIPTICITY_FLOOR),
                    Err(Error::Validation(r)) => *r,
                    Err(e) => return Err(e),
                }
            } else {
                base
            }
        }
    };
    report.warnings = spec.utility_params()?.warnings();
    report.validation = Some(ValidationBlock::from(&result));
    let code = if result.ok {
        0
    } else {
        report.status = Status::Failed;
        1
    };
    Ok((report, code))
}

fn solve(spec: &ProblemSpec, tolerance: f64) -> Result<Solution> {
    match spec.mode {
        Mode::Merton => merton_optimal(&spec.objective_context()?),
        Mode::CapmInvestable => capm_constrained_investable(
            &spec.capm_model()?.expect("validated capm section"),
            &spec.utility_params()?,
            &spec.benchmark_set()?,
            spec.beta0()?,
            tolerance,
        ),
        Mode::CapmNoninvestable => capm_constrained_noninvestable(
            &spec.capm_model()?.expect("validated capm section"),
            &spec.utility_params()?,
            &spec.benchmark_set()?,
            spec.beta0()?,
            tolerance,
        ),
    }
}

fn constraint_of(spec: &ProblemSpec) -> Result<ConstraintSpec> {
    Ok(match spec.mode {
        Mode::Merton => ConstraintSpec::None,
        Mode::CapmInvestable => ConstraintSpec::InvestableBeta {
            beta0: spec.beta0()?,
            betas: spec
                .capm_model()?
                .expect("validated capm section")
                .betas()
                .clone(),
        },
        Mode::CapmNoninvestable => ConstraintSpec::VectorBeta {
            beta0: spec.beta0()?,
            betas: spec
                .capm_model()?
                .expect("validated capm section")
                .betas()
                .clone(),
        },
    })
}

fn optimize(args: &RunArgs) -> Result<(RunReport, i32)> {
    let spec = load(args, false)?;
    if spec.mode != Mode::Merton {
        return Err(Error::Parameter(
            "optimize handles mode \"merton\"; use the capm subcommand for beta constraints".into(),
        ));
    }
    let mut report = RunReport::new("optimize", seed_of(&spec), spec.clone());
    report.warnings = spec.utility_params()?.warnings();
    let sol = solve(&spec, args.tolerance)?;
    report.solution = Some(SolutionBlock::from(&sol));
    Ok((report, 0))
}

fn capm_notes(sol: &Solution) -> Vec<String> {
    let matching = sol.matching_forms();
    let mut notes = vec![if matching.is_empty() {
        "no candidate closed form matches the oracle".to_string()
    } else {
        format!(
            "closed forms matching the oracle: {}",
            matching
                .iter()
                .map(|f| f.expression())
                .collect::<Vec<_>>()
                .join(", ")
        )
    }];
    for check in sol.diagnostics.iter().filter(|c| !c.matches) {
        notes.push(format!(
            "closed form {} deviates from the oracle by {:e}{}",
            check.expression,
            check.deviation,
            if check.known_discrepancy {
                " (known discrepancy)"
            } else {
                ""
            }
        ));
    }
    notes
}

fn capm(args: &RunArgs) -> Result<(RunReport, i32)> {
    let spec = load(args, false)?;
    if spec.mode == Mode::Merton {
        return Err(Error::Parameter(
            "capm needs mode \"capm_investable\" or \"capm_noninvestable\"".into(),
        ));
    }
    let mut report = RunReport::new("capm", seed_of(&spec), spec.clone());
    let sol = solve(&spec, args.tolerance)?;
    report.warnings = spec.utility_params()?.warnings();
    report.warnings.extend(capm_notes(&sol));
    report.solution = Some(SolutionBlock::from(&sol));
    Ok((report, 0))
}

fn simulate(args: &RunArgs) -> Result<(RunReport, i32)> {
    let spec = load(args, true)?;
    let sim = spec.simulation_or_default();
    let mut report = RunReport::new("simulate", sim.seed, spec.clone());
    let ctx = spec.objective_context()?;
    let portfolios = match &sim.portfolios {
        Some(ws) => ws
            .iter()
            .map(|w| crate::objective::Portfolio::from_slice(w))
            .collect(),
        None => {
            let sol = solve(&spec, args.tolerance)?;
            let p = sol.portfolio.clone();
            report.solution = Some(SolutionBlock::from(&sol));
            vec![p]
        }
    };
    let cfg = sim.config(args.workers);
    let samples = simulate_terminal(ctx.model(), &portfolios, ctx.benchmarks(), &cfg)?;
    report.simulation = Some(estimate_expected_utility(&samples, &ctx)?);
    Ok((report, 0))
}

fn verify(args: &RunArgs) -> Result<(RunReport, i32)> {
    let spec = load(args, true)?;
    let sim = spec.simulation_or_default();
    let mut report = RunReport::new("verify", sim.seed, spec.clone());
    report.warnings = spec.utility_params()?.warnings();
    let ctx = spec.objective_context()?;
    let constraint = constraint_of(&spec)?;
    let cfg = sim.config(args.workers);

    let mut failed = false;
    let solution = match spec.mode {
        Mode::Merton => {
            let mut closed = merton_optimal(&ctx)?;
            let oracle = kkt_oracle(&ctx, &constraint)?;
            closed.diagnostics.push(FormulaCheck::new(
                ClosedForm::Unconstrained,
                closed.portfolio.weights(),
                oracle.portfolio.weights(),
                args.tolerance,
            ));
            report.oracle = Some(SolutionBlock::from(&oracle));
            let opt =
                verify_optimality(&ctx, &closed.portfolio, &cfg, sim.perturbations, sim.radius)?;
            if opt.analytic_violations > 0 {
                failed = true;
                report.warnings.push(format!(
                    "{} perturbations improve on the closed form",
                    opt.analytic_violations
                ));
            }
            report.optimality = Some(opt);
            closed
        }
        Mode::CapmInvestable | Mode::CapmNoninvestable => {
            let sol = solve(&spec, args.tolerance)?;
            report.warnings.extend(capm_notes(&sol));
            sol
        }
    };
    if solution.has_failures() {
        failed = true;
        for c in solution.diagnostics.iter().filter(|c| c.is_failure()) {
            report.warnings.push(format!(
                "closed form {} disagrees with the oracle by {:e}",
                c.expression, c.deviation
            ));
        }
    }

    let perturbation =
        check_perturbations(&ctx, &constraint, &solution, ORACLE_PERTURBATIONS, sim.seed)?;
    if perturbation.violations > 0 {
        failed = true;
    }
    report.perturbation_check = Some(PerturbationBlock::from(&perturbation));

    let samples = simulate_terminal(
        ctx.model(),
        std::slice::from_ref(&solution.portfolio),
        ctx.benchmarks(),
        &cfg,
    )?;
    let mc = estimate_expected_utility(&samples, &ctx)?;
    for r in &mc {
        if r.z_score.is_none_or(|z| z.abs() > 4.0) {
            report.warnings.push(format!(
                "Monte Carlo mean {} is more than 4 standard errors from exp(T*H) = {}",
                r.mean_utility, r.analytic
            ));
        }
    }
    report.simulation = Some(mc);
    report.solution = Some(SolutionBlock::from(&solution));

    if failed {
        report.status = Status::Failed;
        Ok((report, 2))
    } else {
        Ok((report, 0))
    }
}

fn estimate(args: EstimateArgs) -> Result<i32> {
    let table = ReturnsTable::read_csv(&args.returns, args.dt)?;
    let model = estimate_from_returns(&table, args.risk_free)?;
    let spec = spec_from_market(&model, args.gamma);
    spec.validate()?;
    emit(args.out.as_ref(), &spec.to_toml_string()?)?;
    Ok(0)
}
