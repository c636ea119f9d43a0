//! Utility functions and the deterministic quadratic objective.
//!
//! For a constant portfolio `π` the expected combined utility over a horizon
//! `T` equals `exp(T · H(π))`, where `H = F + G/2`:
//!
//! ```text
//! F(π) = (1 − γ)[π·(g − r1) + r − ½ Aπ·π] − Σ_j γ_j [ρ_j·(g − r1) + r − ½ Aρ_j·ρ_j]
//! G(π) = A v·v,   v = (1 − γ)π − Σ_j γ_j ρ_j
//! ```
//!
//! so every optimizer in this crate maximizes `H`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::MarketModel;

/// Exponents of the combined utility `V^{1−γ} · Π_j V_j^{−γ_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityParams {
    gamma: f64,
    gammas: Vec<f64>,
}

impl UtilityParams {
    /// `gamma` must lie strictly inside (0, 1); `gammas` must be finite.
    pub fn new(gamma: f64, gammas: Vec<f64>) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Parameter(format!(
                "gamma must lie strictly inside (0, 1), got {gamma}"
            )));
        }
        if let Some(bad) = gammas.iter().find(|g| !g.is_finite()) {
            return Err(Error::Parameter(format!(
                "benchmark exponents must be finite, got {bad}"
            )));
        }
        Ok(UtilityParams { gamma, gammas })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn n_benchmarks(&self) -> usize {
        self.gammas.len()
    }

    /// Non-fatal remarks, currently one per negative benchmark exponent.
    pub fn warnings(&self) -> Vec<String> {
        self.gammas
            .iter()
            .enumerate()
            .filter(|(_, g)| **g < 0.0)
            .map(|(j, g)| format!("benchmark exponent {j} is negative ({g}); it rewards underperforming that benchmark"))
            .collect()
    }
}

/// Benchmark portfolios `ρ_1, …, ρ_k` over the risky assets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchmarkSet {
    weights: Vec<DVector<f64>>,
}

impl BenchmarkSet {
    pub fn new(weights: Vec<DVector<f64>>) -> Result<Self> {
        if let Some(first) = weights.first() {
            let n = first.len();
            for w in &weights {
                if w.len() != n {
                    return Err(Error::dimension("benchmark weights", n, w.len()));
                }
                if w.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Parameter("benchmark weights must be finite".into()));
                }
            }
        }
        Ok(BenchmarkSet { weights })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows.iter().map(|r| DVector::from_column_slice(r)).collect())
    }

    pub fn empty() -> Self {
        BenchmarkSet::default()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[DVector<f64>] {
        &self.weights
    }

    pub fn as_portfolios(&self) -> Vec<Portfolio> {
        self.weights.iter().cloned().map(Portfolio::new).collect()
    }
}

/// Proportions of wealth held in each risky asset; the cash weight is implied.
#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio(DVector<f64>);

impl Portfolio {
    pub fn new(weights: DVector<f64>) -> Self {
        Portfolio(weights)
    }

    pub fn from_slice(weights: &[f64]) -> Self {
        Portfolio(DVector::from_column_slice(weights))
    }

    pub fn zeros(n: usize) -> Self {
        Portfolio(DVector::zeros(n))
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn cash_weight(&self) -> f64 {
        1.0 - self.0.sum()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

impl From<DVector<f64>> for Portfolio {
    fn from(v: DVector<f64>) -> Self {
        Portfolio(v)
    }
}

/// `F`, `G` and `H = F + G/2` at one portfolio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub f: f64,
    pub g: f64,
    pub h: f64,
}

/// Market, utility exponents and benchmarks bundled for repeated evaluation.
#[derive(Debug, Clone)]
pub struct ObjectiveContext {
    model: MarketModel,
    params: UtilityParams,
    benchmarks: BenchmarkSet,
    // Σ_j γ_j ρ_j
    bench_sum: DVector<f64>,
    // Σ_j γ_j [ρ_j·(g − r1) + r − ½ Aρ_j·ρ_j]
    bench_constant: f64,
}

impl ObjectiveContext {
    pub fn new(
        model: MarketModel,
        params: UtilityParams,
        benchmarks: BenchmarkSet,
    ) -> Result<Self> {
        let n = model.n_assets();
        if benchmarks.len() != params.n_benchmarks() {
            return Err(Error::dimension(
                "benchmark count vs benchmark exponents",
                params.n_benchmarks(),
                benchmarks.len(),
            ));
        }
        for rho in benchmarks.weights() {
            if rho.len() != n {
                return Err(Error::dimension("benchmark weights", n, rho.len()));
            }
        }
        let excess = model.excess_drift();
        let a = model.covariance();
        let mut bench_sum = DVector::zeros(n);
        let mut bench_constant = 0.0;
        for (rho, &gj) in benchmarks.weights().iter().zip(params.gammas()) {
            bench_sum.axpy(gj, rho, 1.0);
            let quad = (a * rho).dot(rho);
            bench_constant += gj * (rho.dot(&excess) + model.risk_free() - 0.5 * quad);
        }
        Ok(ObjectiveContext {
            model,
            params,
            benchmarks,
            bench_sum,
            bench_constant,
        })
    }

    /// Context without benchmarks (the classic single-utility problem).
    pub fn classic(model: MarketModel, gamma: f64) -> Result<Self> {
        Self::new(
            model,
            UtilityParams::new(gamma, Vec::new())?,
            BenchmarkSet::empty(),
        )
    }

    pub fn model(&self) -> &MarketModel {
        &self.model
    }

    pub fn params(&self) -> &UtilityParams {
        &self.params
    }

    pub fn benchmarks(&self) -> &BenchmarkSet {
        &self.benchmarks
    }

    pub fn gamma(&self) -> f64 {
        self.params.gamma
    }

    pub fn n_assets(&self) -> usize {
        self.model.n_assets()
    }

    /// Σ_j γ_j ρ_j.
    pub fn benchmark_sum(&self) -> &DVector<f64> {
        &self.bench_sum
    }

    /// The π-independent benchmark part subtracted in `F`.
    pub fn benchmark_constant(&self) -> f64 {
        self.bench_constant
    }

    /// Same context with the benchmarks dropped.
    pub fn without_benchmarks(&self) -> Self {
        ObjectiveContext::classic(self.model.clone(), self.params.gamma)
            .expect("gamma already validated")
    }

    fn check_dim(&self, pi: &Portfolio) -> Result<()> {
        if pi.len() != self.n_assets() {
            return Err(Error::dimension(
                "portfolio weights",
                self.n_assets(),
                pi.len(),
            ));
        }
        Ok(())
    }

    pub fn evaluate(&self, pi: &Portfolio) -> Result<ObjectiveValue> {
        self.check_dim(pi)?;
        let p = pi.weights();
        let gamma = self.params.gamma;
        let a = self.model.covariance();
        let r = self.model.risk_free();
        let f = (1.0 - gamma) * (p.dot(&self.model.excess_drift()) + r - 0.5 * (a * p).dot(p))
            - self.bench_constant;
        let v = p * (1.0 - gamma) - &self.bench_sum;
        let g = (a * &v).dot(&v);
        Ok(ObjectiveValue {
            f,
            g,
            h: f + 0.5 * g,
        })
    }

    pub fn gradient(&self, pi: &Portfolio) -> Result<DVector<f64>> {
        self.check_dim(pi)?;
        let gamma = self.params.gamma;
        let a = self.model.covariance();
        let inner = pi.weights() * gamma + &self.bench_sum;
        Ok((self.model.excess_drift() - a * inner) * (1.0 - gamma))
    }
}

/// Evaluates `F`, `G` and `H` at `pi`.
pub fn objective_h(pi: &Portfolio, ctx: &ObjectiveContext) -> Result<ObjectiveValue> {
    ctx.evaluate(pi)
}

/// Analytic gradient `(1 − γ)[g − r1 − γAπ − A Σ_j γ_j ρ_j]` of `H`.
pub fn grad_h(pi: &Portfolio, ctx: &ObjectiveContext) -> Result<DVector<f64>> {
    ctx.gradient(pi)
}

/// CRRA utility `x^γ/γ`, or `ln x` at `γ = 0`.
pub fn power_utility(x: f64, gamma: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!(
            "utility needs positive wealth, got {x}"
        )));
    }
    if !(gamma < 1.0) {
        return Err(Error::Parameter(format!(
            "utility exponent must be below 1, got {gamma}"
        )));
    }
    if gamma == 0.0 {
        Ok(x.ln())
    } else {
        Ok(x.powf(gamma) / gamma)
    }
}

/// `V^{1−γ} · Π_j V_j^{−γ_j}`, evaluated in log space.
pub fn combined_utility(v: f64, v_bench: &[f64], p: &UtilityParams) -> Result<f64> {
    if v_bench.len() != p.n_benchmarks() {
        return Err(Error::dimension(
            "benchmark wealths",
            p.n_benchmarks(),
            v_bench.len(),
        ));
    }
    if !(v > 0.0) || v_bench.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::Domain("wealth must be strictly positive".into()));
    }
    let log_u = v_bench
        .iter()
        .zip(p.gammas())
        .fold((1.0 - p.gamma) * v.ln(), |acc, (w, g)| acc - g * w.ln());
    Ok(log_u.exp())
}

/// Beta of a portfolio. In the investable case `weights[0]` is the benchmark
/// weight (beta 1) and the rest pair with `betas`; otherwise `b·π`.
pub fn portfolio_beta(weights: &[f64], betas: &[f64], investable: bool) -> Result<f64> {
    let offset = usize::from(investable);
    if weights.len() != betas.len() + offset {
        return Err(Error::dimension(
            "portfolio weights",
            betas.len() + offset,
            weights.len(),
        ));
    }
    let risky = &weights[offset..];
    let dot: f64 = risky.iter().zip(betas).map(|(w, b)| w * b).sum();
    Ok(if investable { weights[0] + dot } else { dot })
}
