//! Market primitives: drift, covariance and risk-free rate of a
//! constant-coefficient geometric Brownian market, the CAPM parameterization
//! of such a market, and the covariance checks every other module relies on.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest Cholesky pivot accepted as "uniformly elliptic".
pub const DEFAULT_ELLIPTICITY_FLOOR: f64 = 1e-12;

/// Relative asymmetry above which a warning is recorded.
pub const ASYMMETRY_WARN: f64 = 1e-12;
/// Relative asymmetry above which construction fails.
pub const ASYMMETRY_LIMIT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub code: String,
    pub message: String,
}

impl Finding {
    fn error(code: &str, message: impl Into<String>) -> Self {
        Finding {
            severity: Severity::Error,
            code: code.to_string(),
            message: message.into(),
        }
    }

    fn warning(code: &str, message: impl Into<String>) -> Self {
        Finding {
            severity: Severity::Warning,
            code: code.to_string(),
            message: message.into(),
        }
    }
}

/// Outcome of a model check. `ok` is true iff no finding is an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub findings: Vec<Finding>,
    pub min_pivot: f64,
}

impl ValidationReport {
    fn from_findings(findings: Vec<Finding>, min_pivot: f64) -> Self {
        let ok = findings.iter().all(|f| f.severity != Severity::Error);
        ValidationReport {
            ok,
            findings,
            min_pivot,
        }
    }

    pub fn has_code(&self, code: &str) -> bool {
        self.findings.iter().any(|f| f.code == code)
    }

    fn prefixed(mut self, block: &str) -> Self {
        for f in &mut self.findings {
            f.code = format!("{block}.{}", f.code);
            f.message = format!("{block}: {}", f.message);
        }
        self
    }
}

/// Symmetrizes `a` in place as (A + Aᵀ)/2 and returns the relative asymmetry
/// max|A_ij − A_ji| / max|A_ij| observed before the update.
fn symmetrize(a: &mut DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let scale = a.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let mut gap = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let (x, y) = (a[(i, j)], a[(j, i)]);
            gap = gap.max((x - y).abs());
            let mid = 0.5 * (x + y);
            a[(i, j)] = mid;
            a[(j, i)] = mid;
        }
    }
    if scale > 0.0 {
        gap / scale
    } else {
        gap
    }
}

fn check_square(what: &str, a: &DMatrix<f64>, n: usize) -> Result<()> {
    if a.nrows() != n {
        return Err(Error::dimension(format!("{what} rows"), n, a.nrows()));
    }
    if a.ncols() != n {
        return Err(Error::dimension(format!("{what} columns"), n, a.ncols()));
    }
    Ok(())
}

/// Constant drift `g`, covariance `A` and risk-free rate `r` of `N` risky assets.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    drift: DVector<f64>,
    covariance: DMatrix<f64>,
    risk_free: f64,
    asymmetry: f64,
}

impl MarketModel {
    /// Builds a model, symmetrizing the covariance.
    ///
    /// Fails on dimension mismatches and on relative asymmetry above
    /// [`ASYMMETRY_LIMIT`]. Positive definiteness is left to
    /// [`validate_market`] so that it can be reported rather than refused.
    pub fn new(drift: DVector<f64>, covariance: DMatrix<f64>, risk_free: f64) -> Result<Self> {
        let n = drift.len();
        if n == 0 {
            return Err(Error::dimension("number of assets", 1, 0));
        }
        let mut covariance = covariance;
        check_square("covariance", &covariance, n)?;
        let asymmetry = symmetrize(&mut covariance);
        if asymmetry > ASYMMETRY_LIMIT {
            return Err(Error::Asymmetric {
                relative: asymmetry,
            });
        }
        Ok(MarketModel {
            drift,
            covariance,
            risk_free,
            asymmetry,
        })
    }

    pub fn from_rows(drift: &[f64], covariance: &[Vec<f64>], risk_free: f64) -> Result<Self> {
        let n = drift.len();
        if covariance.len() != n {
            return Err(Error::dimension("covariance rows", n, covariance.len()));
        }
        for row in covariance {
            if row.len() != n {
                return Err(Error::dimension("covariance columns", n, row.len()));
            }
        }
        let cov = DMatrix::from_fn(n, n, |i, j| covariance[i][j]);
        Self::new(DVector::from_column_slice(drift), cov, risk_free)
    }

    pub fn n_assets(&self) -> usize {
        self.drift.len()
    }

    pub fn drift(&self) -> &DVector<f64> {
        &self.drift
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn risk_free(&self) -> f64 {
        self.risk_free
    }

    /// Relative asymmetry removed by symmetrization at construction.
    pub fn asymmetry(&self) -> f64 {
        self.asymmetry
    }

    /// Excess drift g − r·1.
    pub fn excess_drift(&self) -> DVector<f64> {
        self.drift.add_scalar(-self.risk_free)
    }

    pub fn validate(&self, eps_floor: f64) -> ValidationReport {
        validate_market(self, eps_floor)
    }
}

/// CAPM market: benchmark `S_0` with drift `mu` and volatility `sigma`,
/// assets with betas `b` and residual covariance `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapmModel {
    mu: f64,
    sigma: f64,
    risk_free: f64,
    betas: DVector<f64>,
    residual_cov: DMatrix<f64>,
    asymmetry: f64,
}

impl CapmModel {
    pub fn new(
        mu: f64,
        sigma: f64,
        risk_free: f64,
        betas: DVector<f64>,
        residual_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let n = betas.len();
        if n == 0 {
            return Err(Error::dimension("number of assets", 1, 0));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Parameter(format!(
                "benchmark volatility must be positive and finite, got {sigma}"
            )));
        }
        let mut residual_cov = residual_cov;
        check_square("residual covariance", &residual_cov, n)?;
        let asymmetry = symmetrize(&mut residual_cov);
        if asymmetry > ASYMMETRY_LIMIT {
            return Err(Error::Asymmetric {
                relative: asymmetry,
            });
        }
        Ok(CapmModel {
            mu,
            sigma,
            risk_free,
            betas,
            residual_cov,
            asymmetry,
        })
    }

    pub fn from_rows(
        mu: f64,
        sigma: f64,
        risk_free: f64,
        betas: &[f64],
        residual_cov: &[Vec<f64>],
    ) -> Result<Self> {
        let n = betas.len();
        if residual_cov.len() != n {
            return Err(Error::dimension(
                "residual covariance rows",
                n,
                residual_cov.len(),
            ));
        }
        for row in residual_cov {
            if row.len() != n {
                return Err(Error::dimension(
                    "residual covariance columns",
                    n,
                    row.len(),
                ));
            }
        }
        let c = DMatrix::from_fn(n, n, |i, j| residual_cov[i][j]);
        Self::new(mu, sigma, risk_free, DVector::from_column_slice(betas), c)
    }

    pub fn n_assets(&self) -> usize {
        self.betas.len()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn risk_free(&self) -> f64 {
        self.risk_free
    }

    pub fn betas(&self) -> &DVector<f64> {
        &self.betas
    }

    pub fn residual_cov(&self) -> &DMatrix<f64> {
        &self.residual_cov
    }

    pub fn validate(&self, eps_floor: f64) -> ValidationReport {
        validate_capm(self, eps_floor)
    }
}

/// Lower-triangular `L` with `L Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
    min_pivot: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Smallest squared diagonal entry seen during elimination.
    pub fn min_pivot(&self) -> f64 {
        self.min_pivot
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }

    /// Solves `A x = rhs` by forward and back substitution.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let l = &self.lower;
        let mut y = rhs.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        y
    }
}

enum PivotScan {
    Complete { lower: DMatrix<f64>, min_pivot: f64 },
    Failed { index: usize, pivot: f64 },
}

fn pivot_scan(a: &DMatrix<f64>) -> PivotScan {
    let n = a.nrows();
    let mut lower = DMatrix::<f64>::zeros(n, n);
    let mut min_pivot = f64::INFINITY;
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= lower[(j, k)] * lower[(j, k)];
        }
        // NaN pivots fall through here as failures
        if !(d > 0.0) {
            return PivotScan::Failed { index: j, pivot: d };
        }
        min_pivot = min_pivot.min(d);
        let ljj = d.sqrt();
        lower[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= lower[(i, k)] * lower[(j, k)];
            }
            lower[(i, j)] = s / ljj;
        }
    }
    PivotScan::Complete { lower, min_pivot }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_factor(a: &DMatrix<f64>) -> Result<CholeskyFactor> {
    if a.nrows() != a.ncols() {
        return Err(Error::dimension("matrix columns", a.nrows(), a.ncols()));
    }
    match pivot_scan(a) {
        PivotScan::Complete { lower, min_pivot } => Ok(CholeskyFactor { lower, min_pivot }),
        PivotScan::Failed { index, pivot } => Err(Error::NotPositiveDefinite { index, pivot }),
    }
}

fn covariance_findings(a: &DMatrix<f64>, eps_floor: f64, findings: &mut Vec<Finding>) -> f64 {
    match pivot_scan(a) {
        PivotScan::Complete { min_pivot, .. } => {
            if min_pivot < eps_floor {
                findings.push(Finding::error(
                    "ellipticity",
                    format!(
                        "smallest pivot {min_pivot:e} is below the ellipticity floor {eps_floor:e}"
                    ),
                ));
            }
            min_pivot
        }
        PivotScan::Failed { index, pivot } => {
            if pivot.is_nan() || pivot < -eps_floor {
                findings.push(Finding::error(
                    "not_positive_definite",
                    format!("covariance is not positive definite (pivot {index} is {pivot:e})"),
                ));
            } else {
                findings.push(Finding::error(
                    "ellipticity",
                    format!(
                        "covariance is singular to within the ellipticity floor {eps_floor:e} (pivot {index} is {pivot:e})"
                    ),
                ));
            }
            pivot
        }
    }
}

/// Checks finiteness, symmetry and uniform ellipticity of a market model.
pub fn validate_market(m: &MarketModel, eps_floor: f64) -> ValidationReport {
    let mut findings = Vec::new();
    let finite = m.drift.iter().all(|x| x.is_finite())
        && m.covariance.iter().all(|x| x.is_finite())
        && m.risk_free.is_finite();
    if !finite {
        findings.push(Finding::error(
            "non_finite",
            "model contains non-finite entries",
        ));
    }
    if m.asymmetry > ASYMMETRY_WARN {
        findings.push(Finding::warning(
            "asymmetric_input",
            format!(
                "covariance was symmetrized (relative asymmetry {:e})",
                m.asymmetry
            ),
        ));
    }
    let min_pivot = if finite {
        covariance_findings(&m.covariance, eps_floor, &mut findings)
    } else {
        f64::NAN
    };
    ValidationReport::from_findings(findings, min_pivot)
}

/// Checks a CAPM model: residual covariance as in [`validate_market`] plus μ > r.
pub fn validate_capm(c: &CapmModel, eps_floor: f64) -> ValidationReport {
    let mut findings = Vec::new();
    let finite = c.mu.is_finite()
        && c.risk_free.is_finite()
        && c.betas.iter().all(|x| x.is_finite())
        && c.residual_cov.iter().all(|x| x.is_finite());
    if !finite {
        findings.push(Finding::error(
            "non_finite",
            "model contains non-finite entries",
        ));
    }
    if finite && c.mu <= c.risk_free {
        findings.push(Finding::error(
            "benchmark_drift",
            format!(
                "benchmark drift {} must exceed the risk-free rate {}",
                c.mu, c.risk_free
            ),
        ));
    }
    if c.asymmetry > ASYMMETRY_WARN {
        findings.push(Finding::warning(
            "asymmetric_input",
            format!(
                "residual covariance was symmetrized (relative asymmetry {:e})",
                c.asymmetry
            ),
        ));
    }
    let min_pivot = if finite {
        let mut cov_findings = Vec::new();
        let p = covariance_findings(&c.residual_cov, eps_floor, &mut cov_findings);
        findings.extend(
            ValidationReport::from_findings(cov_findings, p)
                .prefixed("residual_cov")
                .findings,
        );
        p
    } else {
        f64::NAN
    };
    ValidationReport::from_findings(findings, min_pivot)
}

fn require_valid_capm(c: &CapmModel) -> Result<()> {
    let report = validate_capm(c, DEFAULT_ELLIPTICITY_FLOOR);
    if report.ok {
        Ok(())
    } else {
        Err(Error::Validation(Box::new(report)))
    }
}

fn require_valid_assembled(m: MarketModel) -> Result<MarketModel> {
    let report = validate_market(&m, DEFAULT_ELLIPTICITY_FLOOR);
    if report.ok {
        Ok(m)
    } else {
        Err(Error::Validation(Box::new(
            report.prefixed("assembled_covariance"),
        )))
    }
}

/// Market of `N + 1` risky assets with the benchmark as asset 0.
///
/// Drift is `(μ, μ·b + r·(1 − b))`; covariance is
/// `[[σ², σ² bᵀ], [σ² b, C + σ² b bᵀ]]`.
pub fn assemble_capm_investable(c: &CapmModel) -> Result<MarketModel> {
    require_valid_capm(c)?;
    let n = c.n_assets();
    let s2 = c.sigma * c.sigma;
    let mut drift = DVector::zeros(n + 1);
    drift[0] = c.mu;
    for i in 0..n {
        let b = c.betas[i];
        drift[i + 1] = c.mu * b + c.risk_free * (1.0 - b);
    }
    let mut cov = DMatrix::zeros(n + 1, n + 1);
    cov[(0, 0)] = s2;
    for i in 0..n {
        cov[(0, i + 1)] = s2 * c.betas[i];
        cov[(i + 1, 0)] = s2 * c.betas[i];
        for j in 0..n {
            cov[(i + 1, j + 1)] = c.residual_cov[(i, j)] + s2 * c.betas[i] * c.betas[j];
        }
    }
    require_valid_assembled(MarketModel::new(drift, cov, c.risk_free)?)
}

/// Market of the `N` non-benchmark assets alone: drift `(μ − r)·b + r·1`,
/// covariance `C + σ² b bᵀ`.
pub fn assemble_capm_noninvestable(c: &CapmModel) -> Result<MarketModel> {
    require_valid_capm(c)?;
    let n = c.n_assets();
    let s2 = c.sigma * c.sigma;
    let mut drift = DVector::zeros(n);
    for i in 0..n {
        let b = c.betas[i];
        drift[i] = c.mu * b + c.risk_free * (1.0 - b);
    }
    let cov = DMatrix::from_fn(n, n, |i, j| {
        c.residual_cov[(i, j)] + s2 * c.betas[i] * c.betas[j]
    });
    require_valid_assembled(MarketModel::new(drift, cov, c.risk_free)?)
}
