//! Optimal portfolios under a combined power utility of absolute wealth and
//! wealth relative to benchmark portfolios, with CAPM beta constraints.
//!
//! Every closed form is checked against an independent KKT solve of the
//! quadratic objective and against Monte Carlo simulation of the wealth
//! processes.

// negated comparisons below are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod cli;
pub mod error;
pub mod io;
pub mod model;
pub mod objective;
pub mod optimizer;
pub mod simulator;

pub use error::{Error, Result, SchemaIssue};
pub use model::{
    assemble_capm_investable, assemble_capm_noninvestable, cholesky_factor, validate_capm,
    validate_market, CapmModel, CholeskyFactor, Finding, MarketModel, Severity, ValidationReport,
    DEFAULT_ELLIPTICITY_FLOOR,
};
pub use objective::{
    combined_utility, grad_h, objective_h, portfolio_beta, power_utility, BenchmarkSet,
    ObjectiveContext, ObjectiveValue, Portfolio, UtilityParams,
};
pub use optimizer::{
    capm_constrained_investable, capm_constrained_noninvestable, check_perturbations, kkt_oracle,
    merton_optimal, merton_optimal_60_40, ClosedForm, ConstraintSpec, FormulaCheck,
    PerturbationCheck, Solution, MATCH_TOLERANCE,
};
pub use simulator::{
    estimate_expected_utility, simulate_returns, simulate_terminal, verify_optimality,
    OptimalityReport, Scheme, SimConfig, SimResult, TerminalSamples,
};
