use nalgebra::DVector;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use relwealth as rw;

fn to_py(e: rw::Error) -> PyErr {
    match e {
        rw::Error::Conditioning(_) | rw::Error::Domain(_) => {
            PyArithmeticError::new_err(e.to_string())
        }
        rw::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "MarketModel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMarketModel {
    inner: rw::MarketModel,
}

#[pymethods]
impl PyMarketModel {
    #[new]
    fn new(drift: Vec<f64>, covariance: Vec<Vec<f64>>, risk_free: f64) -> PyResult<Self> {
        let inner = rw::MarketModel::from_rows(&drift, &covariance, risk_free).map_err(to_py)?;
        Ok(PyMarketModel { inner })
    }

    #[getter]
    fn n_assets(&self) -> usize {
        self.inner.n_assets()
    }

    #[getter]
    fn drift(&self) -> Vec<f64> {
        self.inner.drift().iter().copied().collect()
    }

    #[getter]
    fn covariance(&self) -> Vec<Vec<f64>> {
        let a = self.inner.covariance();
        (0..a.nrows())
            .map(|i| a.row(i).iter().copied().collect())
            .collect()
    }

    #[getter]
    fn risk_free(&self) -> f64 {
        self.inner.risk_free()
    }

    /// Returns `(ok, min_pivot, [(severity, code, message), ...])`.
    #[pyo3(signature = (eps_floor = rw::DEFAULT_ELLIPTICITY_FLOOR))]
    fn validate(&self, eps_floor: f64) -> (bool, f64, Vec<(String, String, String)>) {
        report_tuple(&self.inner.validate(eps_floor))
    }

    fn __repr__(&self) -> String {
        format!(
            "MarketModel(n_assets={}, risk_free={})",
            self.inner.n_assets(),
            self.inner.risk_free()
        )
    }
}

fn report_tuple(r: &rw::ValidationReport) -> (bool, f64, Vec<(String, String, String)>) {
    let findings = r
        .findings
        .iter()
        .map(|f| {
            let sev = match f.severity {
                rw::Severity::Warning => "warning",
                rw::Severity::Error => "error",
            };
            (sev.to_string(), f.code.clone(), f.message.clone())
        })
        .collect();
    (r.ok, r.min_pivot, findings)
}

#[pyclass(name = "CapmModel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCapmModel {
    inner: rw::CapmModel,
}

#[pymethods]
impl PyCapmModel {
    #[new]
    fn new(
        mu: f64,
        sigma: f64,
        risk_free: f64,
        betas: Vec<f64>,
        residual_cov: Vec<Vec<f64>>,
    ) -> PyResult<Self> {
        let inner =
            rw::CapmModel::from_rows(mu, sigma, risk_free, &betas, &residual_cov).map_err(to_py)?;
        Ok(PyCapmModel { inner })
    }

    #[getter]
    fn n_assets(&self) -> usize {
        self.inner.n_assets()
    }

    /// Market with the benchmark as asset 0.
    fn assemble_investable(&self) -> PyResult<PyMarketModel> {
        let inner = rw::assemble_capm_investable(&self.inner).map_err(to_py)?;
        Ok(PyMarketModel { inner })
    }

    fn assemble_noninvestable(&self) -> PyResult<PyMarketModel> {
        let inner = rw::assemble_capm_noninvestable(&self.inner).map_err(to_py)?;
        Ok(PyMarketModel { inner })
    }

    #[pyo3(signature = (eps_floor = rw::DEFAULT_ELLIPTICITY_FLOOR))]
    fn validate(&self, eps_floor: f64) -> (bool, f64, Vec<(String, String, String)>) {
        report_tuple(&self.inner.validate(eps_floor))
    }
}

#[pyclass(name = "FormulaCheck", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyFormulaCheck {
    formula: String,
    expression: String,
    deviation: f64,
    matches: bool,
    known_discrepancy: bool,
    weights: Vec<f64>,
}

#[pyclass(name = "Solution", frozen, get_all, skip_from_py_object)]
struct PySolution {
    weights: Vec<f64>,
    benchmark_weight: Option<f64>,
    cash_weight: f64,
    objective_value: f64,
    gradient_norm: f64,
    lagrange_multiplier: Option<f64>,
    constraint_residual: f64,
    diagnostics: Vec<PyFormulaCheck>,
}

#[pymethods]
impl PySolution {
    fn __repr__(&self) -> String {
        format!(
            "Solution(weights={:?}, objective_value={}, gradient_norm={:e})",
            self.weights, self.objective_value, self.gradient_norm
        )
    }
}

impl From<rw::Solution> for PySolution {
    fn from(s: rw::Solution) -> Self {
        let diagnostics = s
            .diagnostics
            .iter()
            .map(|c| PyFormulaCheck {
                formula: format!("{:?}", c.formula),
                expression: c.expression.clone(),
                deviation: c.deviation,
                matches: c.matches,
                known_discrepancy: c.known_discrepancy,
                weights: c.weights.clone(),
            })
            .collect();
        PySolution {
            cash_weight: s.cash_weight(),
            weights: s.portfolio.as_slice().to_vec(),
            benchmark_weight: s.benchmark_weight,
            objective_value: s.objective_value,
            gradient_norm: s.gradient_norm,
            lagrange_multiplier: s.lagrange_multiplier,
            constraint_residual: s.constraint_residual,
            diagnostics,
        }
    }
}

#[pyclass(name = "SimResult", frozen, get_all, skip_from_py_object)]
struct PySimResult {
    weights: Vec<f64>,
    paths: usize,
    mean_utility: f64,
    stderr: f64,
    analytic: f64,
    z_score: Option<f64>,
}

fn context(
    model: &PyMarketModel,
    gamma: f64,
    gammas: Vec<f64>,
    benchmarks: Vec<Vec<f64>>,
) -> PyResult<rw::ObjectiveContext> {
    let params = rw::UtilityParams::new(gamma, gammas).map_err(to_py)?;
    let bench = rw::BenchmarkSet::from_rows(&benchmarks).map_err(to_py)?;
    rw::ObjectiveContext::new(model.inner.clone(), params, bench).map_err(to_py)
}

#[pyfunction]
fn power_utility(x: f64, gamma: f64) -> PyResult<f64> {
    rw::power_utility(x, gamma).map_err(to_py)
}

#[pyfunction]
fn combined_utility(v: f64, v_bench: Vec<f64>, gamma: f64, gammas: Vec<f64>) -> PyResult<f64> {
    let params = rw::UtilityParams::new(gamma, gammas).map_err(to_py)?;
    rw::combined_utility(v, &v_bench, &params).map_err(to_py)
}

/// Returns `(F, G, H)`.
#[pyfunction]
#[pyo3(signature = (model, weights, gamma, gammas = Vec::new(), benchmarks = Vec::new()))]
fn objective_h(
    model: &PyMarketModel,
    weights: Vec<f64>,
    gamma: f64,
    gammas: Vec<f64>,
    benchmarks: Vec<Vec<f64>>,
) -> PyResult<(f64, f64, f64)> {
    let ctx = context(model, gamma, gammas, benchmarks)?;
    let v = rw::objective_h(&rw::Portfolio::from_slice(&weights), &ctx).map_err(to_py)?;
    Ok((v.f, v.g, v.h))
}

#[pyfunction]
#[pyo3(signature = (model, weights, gamma, gammas = Vec::new(), benchmarks = Vec::new()))]
fn grad_h(
    model: &PyMarketModel,
    weights: Vec<f64>,
    gamma: f64,
    gammas: Vec<f64>,
    benchmarks: Vec<Vec<f64>>,
) -> PyResult<Vec<f64>> {
    let ctx = context(model, gamma, gammas, benchmarks)?;
    let g = rw::grad_h(&rw::Portfolio::from_slice(&weights), &ctx).map_err(to_py)?;
    Ok(g.iter().copied().collect())
}

#[pyfunction]
#[pyo3(signature = (model, gamma, gammas = Vec::new(), benchmarks = Vec::new()))]
fn merton_optimal(
    model: &PyMarketModel,
    gamma: f64,
    gammas: Vec<f64>,
    benchmarks: Vec<Vec<f64>>,
) -> PyResult<PySolution> {
    let ctx = context(model, gamma, gammas, benchmarks)?;
    Ok(rw::merton_optimal(&ctx).map_err(to_py)?.into())
}

/// KKT solve of the quadratic objective, optionally under `betas·π = beta0`.
#[pyfunction]
#[pyo3(signature = (model, gamma, gammas = Vec::new(), benchmarks = Vec::new(), betas = None, beta0 = 1.0))]
fn kkt_oracle(
    model: &PyMarketModel,
    gamma: f64,
    gammas: Vec<f64>,
    benchmarks: Vec<Vec<f64>>,
    betas: Option<Vec<f64>>,
    beta0: f64,
) -> PyResult<PySolution> {
    let ctx = context(model, gamma, gammas, benchmarks)?;
    let constraint = match betas {
        None => rw::ConstraintSpec::None,
        Some(b) => rw::ConstraintSpec::VectorBeta {
            beta0,
            betas: DVector::from_vec(b),
        },
    };
    Ok(rw::kkt_oracle(&ctx, &constraint).map_err(to_py)?.into())
}

#[pyfunction]
#[pyo3(signature = (capm, gamma, beta0, gammas = Vec::new(), benchmarks = Vec::new(), tolerance = rw::MATCH_TOLERANCE))]
fn capm_investable(
    capm: &PyCapmModel,
    gamma: f64,
    beta0: f64,
    gammas: Vec<f64>,
    benchmarks: Vec<Vec<f64>>,
    tolerance: f64,
) -> PyResult<PySolution> {
    let params = rw::UtilityParams::new(gamma, gammas).map_err(to_py)?;
    let bench = rw::BenchmarkSet::from_rows(&benchmarks).map_err(to_py)?;
    let sol = rw::capm_constrained_investable(&capm.inner, &params, &bench, beta0, tolerance)
        .map_err(to_py)?;
    Ok(sol.into())
}

#[pyfunction]
#[pyo3(signature = (capm, gamma, beta0, gammas = Vec::new(), benchmarks = Vec::new(), tolerance = rw::MATCH_TOLERANCE))]
fn capm_noninvestable(
    capm: &PyCapmModel,
    gamma: f64,
    beta0: f64,
    gammas: Vec<f64>,
    benchmarks: Vec<Vec<f64>>,
    tolerance: f64,
) -> PyResult<PySolution> {
    let params = rw::UtilityParams::new(gamma, gammas).map_err(to_py)?;
    let bench = rw::BenchmarkSet::from_rows(&benchmarks).map_err(to_py)?;
    let sol = rw::capm_constrained_noninvestable(&capm.inner, &params, &bench, beta0, tolerance)
        .map_err(to_py)?;
    Ok(sol.into())
}

/// Monte Carlo estimate of the expected combined utility of each portfolio.
#[pyfunction]
#[pyo3(signature = (
    model, portfolios, gamma, gammas = Vec::new(), benchmarks = Vec::new(),
    horizon = 1.0, paths = 100_000, seed = 42, scheme = "exact", steps = 1
))]
#[allow(clippy::too_many_arguments)]
fn expected_utility(
    py: Python<'_>,
    model: &PyMarketModel,
    portfolios: Vec<Vec<f64>>,
    gamma: f64,
    gammas: Vec<f64>,
    benchmarks: Vec<Vec<f64>>,
    horizon: f64,
    paths: usize,
    seed: u64,
    scheme: &str,
    steps: usize,
) -> PyResult<Vec<PySimResult>> {
    let ctx = context(model, gamma, gammas, benchmarks)?;
    let cfg = rw::SimConfig {
        horizon,
        steps,
        paths,
        seed,
        scheme: scheme.parse().map_err(to_py)?,
        workers: None,
    };
    let pis: Vec<rw::Portfolio> = portfolios
        .iter()
        .map(|w| rw::Portfolio::from_slice(w))
        .collect();
    let results = py
        .detach(|| {
            let samples = rw::simulate_terminal(ctx.model(), &pis, ctx.benchmarks(), &cfg)?;
            rw::estimate_expected_utility(&samples, &ctx)
        })
        .map_err(to_py)?;
    Ok(results
        .into_iter()
        .map(|r| PySimResult {
            weights: r.weights,
            paths: r.paths,
            mean_utility: r.mean_utility,
            stderr: r.stderr,
            analytic: r.analytic,
            z_score: r.z_score,
        })
        .collect())
}

#[pymodule]
fn pyrelwealth(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMarketModel>()?;
    m.add_class::<PyCapmModel>()?;
    m.add_class::<PySolution>()?;
    m.add_class::<PyFormulaCheck>()?;
    m.add_class::<PySimResult>()?;
    m.add_function(wrap_pyfunction!(power_utility, m)?)?;
    m.add_function(wrap_pyfunction!(combined_utility, m)?)?;
    m.add_function(wrap_pyfunction!(objective_h, m)?)?;
    m.add_function(wrap_pyfunction!(grad_h, m)?)?;
    m.add_function(wrap_pyfunction!(merton_optimal, m)?)?;
    m.add_function(wrap_pyfunction!(kkt_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(capm_investable, m)?)?;
    m.add_function(wrap_pyfunction!(capm_noninvestable, m)?)?;
    m.add_function(wrap_pyfunction!(expected_utility, m)?)?;
    Ok(())
}
