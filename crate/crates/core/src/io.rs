//! Problem files, return tables and run reports.
//!
//! Problem files are TOML:
//!
//! ```toml
//! mode = "merton"            # merton | capm_investable | capm_noninvestable
//!
//! [market]                   # mode = "merton"
//! drift = [0.08, 0.05]
//! covariance = [[0.04, 0.01], [0.01, 0.09]]
//! risk_free = 0.02
//!
//! [capm]                     # capm modes
//! mu = 0.08
//! sigma = 0.2
//! risk_free = 0.02
//! betas = [1.5]
//! residual_cov = [[0.05]]
//!
//! [utility]
//! gamma = 0.5
//! gammas = [0.2]             # one exponent per benchmark
//!
//! [benchmarks]
//! weights = [[1.0, 0.0]]     # over the solved market's assets
//!
//! [constraint]               # capm modes
//! beta0 = 1.0
//!
//! [simulation]               # optional
//! horizon = 1.0
//! steps = 1
//! paths = 100000
//! seed = 42
//! scheme = "exact_log"       # or "euler_log"
//! perturbations = 200
//! radius = 0.1
//! portfolios = [[0.5, 0.5]]  # optional; defaults to the optimal portfolio
//! ```
//!
//! In the investable CAPM mode the solved market has `N + 1` assets with the
//! benchmark first, so benchmark and simulated weight vectors have length
//! `N + 1` there.
//!
//! Return tables are CSV with a header row of asset names and one row of
//! simple per-period returns per period.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SchemaIssue};
use crate::model::{
    assemble_capm_investable, assemble_capm_noninvestable, validate_market, CapmModel, Finding,
    MarketModel, ValidationReport, DEFAULT_ELLIPTICITY_FLOOR,
};
use crate::objective::{BenchmarkSet, ObjectiveContext, Portfolio, UtilityParams};
use crate::optimizer::{FormulaCheck, PerturbationCheck, Solution};
use crate::simulator::{OptimalityReport, Scheme, SimConfig, SimResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Merton,
    CapmInvestable,
    CapmNoninvestable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub drift: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub risk_free: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapmSection {
    pub mu: f64,
    pub sigma: f64,
    pub risk_free: f64,
    pub betas: Vec<f64>,
    pub residual_cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitySection {
    pub gamma: f64,
    #[serde(default)]
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    pub beta0: f64,
}

fn default_horizon() -> f64 {
    1.0
}
fn default_steps() -> usize {
    1
}
fn default_paths() -> usize {
    100_000
}
fn default_seed() -> u64 {
    42
}
fn default_perturbations() -> usize {
    200
}
fn default_radius() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_perturbations")]
    pub perturbations: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub portfolios: Option<Vec<Vec<f64>>>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            horizon: default_horizon(),
            steps: default_steps(),
            paths: default_paths(),
            seed: default_seed(),
            scheme: Scheme::default(),
            perturbations: default_perturbations(),
            radius: default_radius(),
            portfolios: None,
        }
    }
}

impl SimulationSection {
    pub fn config(&self, workers: Option<usize>) -> SimConfig {
        SimConfig {
            horizon: self.horizon,
            steps: self.steps,
            paths: self.paths,
            seed: self.seed,
            scheme: self.scheme,
            workers,
        }
    }
}

/// A validated problem file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market: Option<MarketSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capm: Option<CapmSection>,
    pub utility: UtilitySection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmarks: Option<BenchmarkSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<ConstraintSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSection>,
}

struct Issues(Vec<SchemaIssue>);

impl Issues {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(SchemaIssue {
            path: path.into(),
            message: message.into(),
        });
    }

    fn finite(&mut self, path: &str, x: f64) {
        if !x.is_finite() {
            self.push(path, format!("expected a finite number, found {x}"));
        }
    }

    fn finite_vec(&mut self, path: &str, xs: &[f64]) {
        for (i, x) in xs.iter().enumerate() {
            self.finite(&format!("{path}[{i}]"), *x);
        }
    }

    fn square(&mut self, path: &str, rows: &[Vec<f64>], n: usize) {
        if rows.len() != n {
            self.push(path, format!("expected {n} rows, found {}", rows.len()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                self.push(
                    format!("{path}[{i}]"),
                    format!("expected {n} entries, found {}", row.len()),
                );
            }
            self.finite_vec(&format!("{path}[{i}]"), row);
        }
    }
}

impl ProblemSpec {
    /// Number of assets of the market the optimizer works on.
    pub fn n_assets(&self) -> usize {
        match self.mode {
            Mode::Merton => self.market.as_ref().map_or(0, |m| m.drift.len()),
            Mode::CapmInvestable => self.capm.as_ref().map_or(0, |c| c.betas.len() + 1),
            Mode::CapmNoninvestable => self.capm.as_ref().map_or(0, |c| c.betas.len()),
        }
    }

    pub fn benchmark_rows(&self) -> &[Vec<f64>] {
        self.benchmarks
            .as_ref()
            .map_or(&[], |b| b.weights.as_slice())
    }

    pub fn simulation_or_default(&self) -> SimulationSection {
        self.simulation.clone().unwrap_or_default()
    }

    /// Schema checks, then dimension checks.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Issues(Vec::new());
        match self.mode {
            Mode::Merton => {
                if self.capm.is_some() {
                    issues.push("capm", "not allowed when mode is \"merton\"");
                }
                match &self.market {
                    None => issues.push("market", "required when mode is \"merton\""),
                    Some(m) => {
                        if m.drift.is_empty() {
                            issues.push("market.drift", "at least one asset is required");
                        }
                        issues.finite_vec("market.drift", &m.drift);
                        issues.square("market.covariance", &m.covariance, m.drift.len());
                        issues.finite("market.risk_free", m.risk_free);
                    }
                }
            }
            Mode::CapmInvestable | Mode::CapmNoninvestable => {
                if self.market.is_some() {
                    issues.push("market", "not allowed in capm modes");
                }
                match &self.capm {
                    None => issues.push("capm", "required in capm modes"),
                    Some(c) => {
                        issues.finite("capm.mu", c.mu);
                        issues.finite("capm.risk_free", c.risk_free);
                        if !(c.sigma.is_finite() && c.sigma > 0.0) {
                            issues.push(
                                "capm.sigma",
                                format!("expected a positive number, found {}", c.sigma),
                            );
                        }
                        if c.betas.is_empty() {
                            issues.push("capm.betas", "at least one asset is required");
                        }
                        issues.finite_vec("capm.betas", &c.betas);
                        issues.square("capm.residual_cov", &c.residual_cov, c.betas.len());
                    }
                }
                match &self.constraint {
                    None => issues.push("constraint", "required in capm modes"),
                    Some(c) => issues.finite("constraint.beta0", c.beta0),
                }
            }
        }
        let g = self.utility.gamma;
        if !(g > 0.0 && g < 1.0) {
            issues.push(
                "utility.gamma",
                format!("must lie strictly inside (0, 1), found {g}"),
            );
        }
        issues.finite_vec("utility.gammas", &self.utility.gammas);
        for (j, w) in self.benchmark_rows().iter().enumerate() {
            issues.finite_vec(&format!("benchmarks.weights[{j}]"), w);
        }
        if let Some(s) = &self.simulation {
            if !(s.horizon.is_finite() && s.horizon > 0.0) {
                issues.push(
                    "simulation.horizon",
                    format!("expected a positive number, found {}", s.horizon),
                );
            }
            if s.steps == 0 {
                issues.push("simulation.steps", "must be at least 1");
            }
            if s.paths == 0 {
                issues.push("simulation.paths", "must be at least 1");
            }
            if !(s.radius.is_finite() && s.radius >= 0.0) {
                issues.push(
                    "simulation.radius",
                    format!("expected a non-negative number, found {}", s.radius),
                );
            }
            for (j, w) in s.portfolios.iter().flatten().enumerate() {
                issues.finite_vec(&format!("simulation.portfolios[{j}]"), w);
            }
        }
        if !issues.0.is_empty() {
            return Err(Error::Schema(issues.0));
        }

        let n = self.n_assets();
        let k = self.benchmark_rows().len();
        if self.utility.gammas.len() != k {
            return Err(Error::dimension(
                "utility.gammas (one exponent per benchmark)",
                k,
                self.utility.gammas.len(),
            ));
        }
        for w in self.benchmark_rows() {
            if w.len() != n {
                return Err(Error::dimension("benchmarks.weights entry", n, w.len()));
            }
        }
        if let Some(ps) = self.simulation.as_ref().and_then(|s| s.portfolios.as_ref()) {
            for w in ps {
                if w.len() != n {
                    return Err(Error::dimension("simulation.portfolios entry", n, w.len()));
                }
            }
        }
        Ok(())
    }

    pub fn capm_model(&self) -> Result<Option<CapmModel>> {
        self.capm
            .as_ref()
            .map(|c| CapmModel::from_rows(c.mu, c.sigma, c.risk_free, &c.betas, &c.residual_cov))
            .transpose()
    }

    /// The market the optimizer works on (assembled in CAPM modes).
    pub fn market_model(&self) -> Result<MarketModel> {
        match self.mode {
            Mode::Merton => {
                let m = self
                    .market
                    .as_ref()
                    .ok_or_else(|| Error::Schema(vec![missing("market")]))?;
                MarketModel::from_rows(&m.drift, &m.covariance, m.risk_free)
            }
            Mode::CapmInvestable => assemble_capm_investable(&self.require_capm()?),
            Mode::CapmNoninvestable => assemble_capm_noninvestable(&self.require_capm()?),
        }
    }

    fn require_capm(&self) -> Result<CapmModel> {
        self.capm_model()?
            .ok_or_else(|| Error::Schema(vec![missing("capm")]))
    }

    pub fn utility_params(&self) -> Result<UtilityParams> {
        UtilityParams::new(self.utility.gamma, self.utility.gammas.clone())
    }

    pub fn benchmark_set(&self) -> Result<BenchmarkSet> {
        BenchmarkSet::from_rows(self.benchmark_rows())
    }

    pub fn objective_context(&self) -> Result<ObjectiveContext> {
        ObjectiveContext::new(
            self.market_model()?,
            self.utility_params()?,
            self.benchmark_set()?,
        )
    }

    pub fn beta0(&self) -> Result<f64> {
        self.constraint
            .as_ref()
            .map(|c| c.beta0)
            .ok_or_else(|| Error::Schema(vec![missing("constraint")]))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}

fn missing(path: &str) -> SchemaIssue {
    SchemaIssue {
        path: path.to_string(),
        message: "missing section".to_string(),
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Parses and validates a problem from TOML text.
pub fn parse_problem(text: &str) -> Result<ProblemSpec> {
    if let Err(e) = text.parse::<toml::Table>() {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        return Err(Error::Parse {
            line,
            column,
            message: e.message().to_string(),
        });
    }
    let spec: ProblemSpec = toml::from_str(text).map_err(|e| {
        let path = e
            .span()
            .map(|s| {
                let (l, c) = line_col(text, s.start);
                format!("line {l}, column {c}")
            })
            .unwrap_or_else(|| "document".to_string());
        Error::Schema(vec![SchemaIssue {
            path,
            message: e.message().to_string(),
        }])
    })?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_problem(path: impl AsRef<Path>) -> Result<ProblemSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_problem(&text)
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Historical simple returns, one row per period of length `dt` years.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsTable {
    pub dt: f64,
    pub names: Vec<String>,
    pub returns: DMatrix<f64>,
}

impl ReturnsTable {
    pub fn new(dt: f64, names: Vec<String>, returns: DMatrix<f64>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Parameter(format!(
                "period length must be positive, got {dt}"
            )));
        }
        if names.len() != returns.ncols() {
            return Err(Error::dimension(
                "return columns",
                names.len(),
                returns.ncols(),
            ));
        }
        Ok(ReturnsTable { dt, names, returns })
    }

    pub fn from_reader(reader: impl Read, dt: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let names: Vec<String> = rdr
            .headers()
            .map_err(|e| csv_error(&e))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let n = names.len();
        let mut data = Vec::new();
        let mut issues = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| csv_error(&e))?;
            if record.len() != n {
                return Err(Error::dimension(
                    format!("fields in row {}", r + 1),
                    n,
                    record.len(),
                ));
            }
            for (c, cell) in record.iter().enumerate() {
                let cell = cell.trim();
                let path = format!("row {} column {}", r + 1, names[c]);
                if cell.is_empty() {
                    issues.push(SchemaIssue {
                        path,
                        message: "missing value".into(),
                    });
                    data.push(f64::NAN);
                    continue;
                }
                match cell.parse::<f64>() {
                    Ok(x) if x.is_finite() => data.push(x),
                    _ => {
                        issues.push(SchemaIssue {
                            path,
                            message: format!("not a finite number: {cell:?}"),
                        });
                        data.push(f64::NAN);
                    }
                }
            }
        }
        if !issues.is_empty() {
            return Err(Error::Schema(issues));
        }
        let rows = data.len() / n.max(1);
        Self::new(dt, names, DMatrix::from_row_slice(rows, n, &data))
    }

    pub fn read_csv(path: impl AsRef<Path>, dt: f64) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f, dt)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.names).map_err(|e| csv_error(&e))?;
        for row in self.returns.row_iter() {
            w.write_record(row.iter().map(|x| x.to_string()))
                .map_err(|e| csv_error(&e))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Serialization(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
    }
}

fn csv_error(e: &csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Parse {
            line: p.line() as usize,
            column: 0,
            message: e.to_string(),
        },
        None => Error::Serialization(e.to_string()),
    }
}

/// Annualized column means and sample covariance (denominator `T − 1`).
pub fn sample_moments(table: &ReturnsTable) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let rows = table.returns.nrows();
    let n = table.returns.ncols();
    if n == 0 {
        return Err(Error::dimension("return columns", 1, 0));
    }
    if rows < 2 {
        return Err(Error::dimension("return rows", 2, rows));
    }
    let means = DVector::from_fn(n, |j, _| table.returns.column(j).sum() / rows as f64);
    let centered = DMatrix::from_fn(rows, n, |i, j| table.returns[(i, j)] - means[j]);
    let cov = (centered.transpose() * &centered) / ((rows - 1) as f64 * table.dt);
    Ok((means / table.dt, cov))
}

/// Market model from historical simple returns; fails with the validation
/// report attached when the sample covariance is not uniformly elliptic.
///
/// On returns generated by the model itself the estimates are expected
/// within [`estimation_tolerance`] of the truth.
pub fn estimate_from_returns(table: &ReturnsTable, risk_free: f64) -> Result<MarketModel> {
    let n = table.returns.ncols();
    let rows = table.returns.nrows();
    if rows < n + 2 {
        return Err(Error::dimension(
            "return rows (at least assets + 2)",
            n + 2,
            rows,
        ));
    }
    let (drift, cov) = sample_moments(table)?;
    let model = MarketModel::new(drift, cov, risk_free)?;
    let report = validate_market(&model, DEFAULT_ELLIPTICITY_FLOOR);
    if report.ok {
        Ok(model)
    } else {
        Err(Error::Validation(Box::new(report)))
    }
}

/// Accepted drift error in standard errors.
pub const DRIFT_TOLERANCE_SIGMAS: f64 = 3.0;
/// Accepted covariance error, relative in the Frobenius norm.
pub const COVARIANCE_TOLERANCE: f64 = 0.1;

/// Accepted estimation error against a reference model: per-asset drift
/// bounds `3·sqrt(A_ii / (T·dt))` and the relative Frobenius bound on `A`.
pub fn estimation_tolerance(
    reference: &MarketModel,
    rows: usize,
    dt: f64,
) -> Result<(DVector<f64>, f64)> {
    if rows == 0 || !(dt > 0.0) {
        return Err(Error::Parameter(format!(
            "estimation tolerance needs rows > 0 and dt > 0, got {rows} and {dt}"
        )));
    }
    let a = reference.covariance();
    let years = rows as f64 * dt;
    let drift = DVector::from_fn(reference.n_assets(), |i, _| {
        DRIFT_TOLERANCE_SIGMAS * (a[(i, i)] / years).sqrt()
    });
    Ok((drift, COVARIANCE_TOLERANCE))
}

/// Problem file for an estimated market.
pub fn spec_from_market(model: &MarketModel, gamma: f64) -> ProblemSpec {
    let n = model.n_assets();
    ProblemSpec {
        mode: Mode::Merton,
        market: Some(MarketSection {
            drift: model.drift().iter().copied().collect(),
            covariance: (0..n)
                .map(|i| model.covariance().row(i).iter().copied().collect())
                .collect(),
            risk_free: model.risk_free(),
        }),
        capm: None,
        utility: UtilitySection {
            gamma,
            gammas: Vec::new(),
        },
        benchmarks: None,
        constraint: None,
        simulation: None,
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationBlock {
    pub ok: bool,
    pub min_pivot: Option<f64>,
    pub findings: Vec<Finding>,
}

impl From<&ValidationReport> for ValidationBlock {
    fn from(r: &ValidationReport) -> Self {
        ValidationBlock {
            ok: r.ok,
            min_pivot: finite(r.min_pivot),
            findings: r.findings.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionBlock {
    pub weights: Vec<f64>,
    pub benchmark_weight: Option<f64>,
    pub cash_weight: f64,
    pub objective_value: f64,
    pub gradient_norm: f64,
    pub constraint_residual: f64,
    pub lagrange_multiplier: Option<f64>,
    pub diagnostics: Vec<FormulaCheck>,
}

impl From<&Solution> for SolutionBlock {
    fn from(s: &Solution) -> Self {
        SolutionBlock {
            weights: s.portfolio.as_slice().to_vec(),
            benchmark_weight: s.benchmark_weight,
            cash_weight: s.cash_weight(),
            objective_value: s.objective_value,
            gradient_norm: s.gradient_norm,
            constraint_residual: s.constraint_residual,
            lagrange_multiplier: s.lagrange_multiplier,
            diagnostics: s.diagnostics.clone(),
        }
    }
}

impl SolutionBlock {
    pub fn portfolio(&self) -> Portfolio {
        Portfolio::from_slice(&self.weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBlock {
    pub samples: usize,
    pub violations: usize,
    pub max_gain: Option<f64>,
}

impl From<&PerturbationCheck> for PerturbationBlock {
    fn from(p: &PerturbationCheck) -> Self {
        PerturbationBlock {
            samples: p.samples,
            violations: p.violations,
            max_gain: finite(p.max_gain),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

/// Everything one CLI invocation produced, in a stable field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub status: Status,
    pub spec: ProblemSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<SolutionBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<SolutionBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation_check: Option<PerturbationBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<Vec<SimResult>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimality: Option<OptimalityReport>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, seed: u64, spec: ProblemSpec) -> Self {
        RunReport {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            status: Status::Ok,
            spec,
            validation: None,
            solution: None,
            oracle: None,
            perturbation_check: None,
            simulation: None,
            optimality: None,
            warnings: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s =
            serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
mode = "merton"

[market]
drift = [0.08]
covariance = [[0.04]]
risk_free = 0.02

[utility]
gamma = 0.5
"#;

    #[test]
    fn minimal_spec_parses() {
        let spec = parse_problem(MINIMAL).unwrap();
        assert_eq!(spec.mode, Mode::Merton);
        assert_eq!(spec.n_assets(), 1);
        let ctx = spec.objective_context().unwrap();
        let sol = crate::optimizer::merton_optimal(&ctx).unwrap();
        assert!((sol.portfolio.weights()[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn gamma_out_of_range_is_a_schema_error() {
        let text = MINIMAL.replace("gamma = 0.5", "gamma = 1.2");
        match parse_problem(&text) {
            Err(Error::Schema(issues)) => {
                assert_eq!(issues.len(), 1);
                assert_eq!(issues[0].path, "utility.gamma");
                assert!(issues[0].message.contains("(0, 1)"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn benchmark_exponent_count_is_a_dimension_error() {
        let text = format!(
            "{}gammas = [0.2]\n\n[benchmarks]\nweights = [[1.0], [0.5]]\n",
            MINIMAL.trim_end().to_string() + "\n"
        );
        assert!(matches!(parse_problem(&text), Err(Error::Dimension { .. })));
    }

    #[test]
    fn syntax_error_has_position() {
        match parse_problem("mode = \"merton\"\n[market\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = MINIMAL.replace("risk_free = 0.02", "risk_free = 0.02\nrate = 1.0");
        assert!(matches!(parse_problem(&text), Err(Error::Schema(_))));
    }

    #[test]
    fn capm_mode_needs_constraint() {
        let text = r#"
mode = "capm_investable"
[capm]
mu = 0.08
sigma = 0.2
risk_free = 0.02
betas = [1.5]
residual_cov = [[0.05]]
[utility]
gamma = 0.5
"#;
        match parse_problem(text) {
            Err(Error::Schema(issues)) => assert!(issues.iter().any(|i| i.path == "constraint")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = parse_problem(MINIMAL).unwrap();
        let text = spec.to_toml_string().unwrap();
        assert_eq!(parse_problem(&text).unwrap(), spec);
    }

    #[test]
    fn identical_columns_fail_validation() {
        let csv = "a,b\n0.01,0.01\n0.02,0.02\n-0.01,-0.01\n0.03,0.03\n0.00,0.00\n";
        let t = ReturnsTable::from_reader(csv.as_bytes(), 1.0 / 12.0).unwrap();
        match estimate_from_returns(&t, 0.02) {
            Err(Error::Validation(r)) => assert!(!r.ok),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_returns_give_drift_but_no_model() {
        let csv = "spx\n0.01\n0.01\n0.01\n0.01\n";
        let t = ReturnsTable::from_reader(csv.as_bytes(), 1.0 / 12.0).unwrap();
        let (g, a) = sample_moments(&t).unwrap();
        assert!((g[0] - 0.12).abs() < 1e-14);
        assert_eq!(a[(0, 0)], 0.0);
        assert!(matches!(
            estimate_from_returns(&t, 0.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn missing_cell_is_an_error() {
        let csv = "a,b\n0.01,\n0.02,0.03\n";
        match ReturnsTable::from_reader(csv.as_bytes(), 1.0) {
            Err(Error::Schema(issues)) => assert_eq!(issues[0].path, "row 1 column b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_few_rows() {
        let csv = "a,b\n0.01,0.02\n0.02,0.03\n0.0,0.01\n";
        let t = ReturnsTable::from_reader(csv.as_bytes(), 1.0).unwrap();
        assert!(matches!(
            estimate_from_returns(&t, 0.0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let t = ReturnsTable::new(
            0.25,
            vec!["x".into(), "y".into()],
            DMatrix::from_row_slice(2, 2, &[0.1, -0.2, 1.0 / 3.0, 0.0]),
        )
        .unwrap();
        let back = ReturnsTable::from_reader(t.to_csv_string().unwrap().as_bytes(), 0.25).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
