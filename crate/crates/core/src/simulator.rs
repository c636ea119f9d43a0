//! Monte Carlo engine for portfolio and benchmark log-wealth.
//!
//! Each path owns a ChaCha8 stream selected by its index, so results do not
//! depend on how paths are scheduled across workers. Reductions go through a
//! fixed summation tree for the same reason.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cholesky_factor, validate_market, MarketModel, DEFAULT_ELLIPTICITY_FLOOR};
use crate::objective::{BenchmarkSet, ObjectiveContext, Portfolio};

/// Paths per reduction block in [`verify_optimality`].
const BLOCK: usize = 1024;
/// Stream reserved for perturbation directions; path streams count up from 0.
const DIRECTION_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// One exact Gaussian step over the whole horizon.
    #[default]
    ExactLog,
    /// `steps` increments of the log-wealth SDE.
    EulerLog,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" | "exact_log" => Ok(Scheme::ExactLog),
            "euler" | "euler_log" => Ok(Scheme::EulerLog),
            other => Err(Error::Parameter(format!("unknown scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// Worker threads; `None` uses the global pool. Never affects results.
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon: 1.0,
            steps: 1,
            paths: 100_000,
            seed: 42,
            scheme: Scheme::ExactLog,
            workers: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Parameter(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.steps == 0 {
            return Err(Error::Parameter("steps must be at least 1".into()));
        }
        if self.paths == 0 {
            return Err(Error::Parameter("paths must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Parameter("workers must be at least 1".into()));
        }
        Ok(())
    }

    fn effective_steps(&self) -> usize {
        match self.scheme {
            Scheme::ExactLog => 1,
            Scheme::EulerLog => self.steps,
        }
    }

    fn run<T: Send>(&self, job: impl FnOnce() -> T + Send) -> Result<T> {
        match self.workers {
            None => Ok(job()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Parameter(format!("cannot start worker pool: {e}")))?;
                Ok(pool.install(job))
            }
        }
    }
}

/// Terminal log-wealth, one row per path. Columns are the simulated
/// portfolios followed by the benchmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSamples {
    pub horizon: f64,
    pub portfolios: Vec<Portfolio>,
    pub n_benchmarks: usize,
    pub log_wealth: DMatrix<f64>,
}

impl TerminalSamples {
    pub fn paths(&self) -> usize {
        self.log_wealth.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub weights: Vec<f64>,
    pub paths: usize,
    pub mean_utility: f64,
    pub stderr: f64,
    /// `exp(T · H(π))`.
    pub analytic: f64,
    /// `(mean − analytic) / stderr`; absent when stderr is zero and the two differ.
    pub z_score: Option<f64>,
}

/// Sum over a fixed binary tree; the result depends only on the input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().fold(0.0, |a, x| a + x);
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Per-column drift of log-wealth: `w·(g − r1) + r − ½ Aw·w`.
fn log_drift(model: &MarketModel, w: &DVector<f64>) -> f64 {
    w.dot(&model.excess_drift()) + model.risk_free() - 0.5 * (model.covariance() * w).dot(w)
}

struct PathEngine {
    lower: DMatrix<f64>,
    weights: Vec<DVector<f64>>,
    drifts: Vec<f64>,
    steps: usize,
    dt: f64,
    seed: u64,
}

impl PathEngine {
    fn new(model: &MarketModel, columns: Vec<DVector<f64>>, cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let report = validate_market(model, DEFAULT_ELLIPTICITY_FLOOR);
        if !report.ok {
            return Err(Error::Validation(Box::new(report)));
        }
        let n = model.n_assets();
        for w in &columns {
            if w.len() != n {
                return Err(Error::dimension("simulated weights", n, w.len()));
            }
        }
        let lower = cholesky_factor(model.covariance())?.lower().clone();
        let drifts = columns.iter().map(|w| log_drift(model, w)).collect();
        let steps = cfg.effective_steps();
        Ok(PathEngine {
            lower,
            weights: columns,
            drifts,
            steps,
            dt: cfg.horizon / steps as f64,
            seed: cfg.seed,
        })
    }

    fn path(&self, index: usize) -> Vec<f64> {
        let n = self.lower.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let scale = self.dt.sqrt();
        let mut log_v = vec![0.0; self.weights.len()];
        let mut xi = DVector::zeros(n);
        for _ in 0..self.steps {
            for z in xi.iter_mut() {
                let draw: f64 = StandardNormal.sample(&mut rng);
                *z = scale * draw;
            }
            let shock = &self.lower * &xi;
            for ((lv, w), mu) in log_v.iter_mut().zip(&self.weights).zip(&self.drifts) {
                *lv += mu * self.dt + w.dot(&shock);
            }
        }
        log_v
    }
}

/// Simulates terminal log-wealth of `portfolios` and `benchmarks` with common
/// random numbers: every column of a path sees the same Brownian increments.
pub fn simulate_terminal(
    model: &MarketModel,
    portfolios: &[Portfolio],
    benchmarks: &BenchmarkSet,
    cfg: &SimConfig,
) -> Result<TerminalSamples> {
    let columns: Vec<DVector<f64>> = portfolios
        .iter()
        .map(|p| p.weights().clone())
        .chain(benchmarks.weights().iter().cloned())
        .collect();
    let engine = PathEngine::new(model, columns, cfg)?;
    let rows: Vec<Vec<f64>> = cfg.run(|| {
        (0..cfg.paths)
            .into_par_iter()
            .map(|i| engine.path(i))
            .collect()
    })?;
    let ncols = engine.weights.len();
    let log_wealth = DMatrix::from_fn(cfg.paths, ncols, |i, j| rows[i][j]);
    Ok(TerminalSamples {
        horizon: cfg.horizon,
        portfolios: portfolios.to_vec(),
        n_benchmarks: benchmarks.len(),
        log_wealth,
    })
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = pairwise_sum(values) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|u| (u - mean) * (u - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn z_score(mean: f64, reference: f64, stderr: f64) -> Option<f64> {
    if stderr > 0.0 {
        Some((mean - reference) / stderr)
    } else if mean == reference {
        Some(0.0)
    } else {
        None
    }
}

/// Monte Carlo mean and standard error of the combined utility for each
/// simulated portfolio, next to the exact value `exp(T · H(π))`.
pub fn estimate_expected_utility(
    samples: &TerminalSamples,
    ctx: &ObjectiveContext,
) -> Result<Vec<SimResult>> {
    let k = ctx.params().n_benchmarks();
    if samples.n_benchmarks != k {
        return Err(Error::dimension(
            "simulated benchmarks",
            k,
            samples.n_benchmarks,
        ));
    }
    let gamma = ctx.gamma();
    let gammas = ctx.params().gammas();
    let n_port = samples.portfolios.len();
    let lw = &samples.log_wealth;
    samples
        .portfolios
        .iter()
        .enumerate()
        .map(|(p, pi)| {
            let utilities: Vec<f64> = (0..lw.nrows())
                .map(|i| {
                    let log_u = gammas
                        .iter()
                        .enumerate()
                        .fold((1.0 - gamma) * lw[(i, p)], |acc, (j, g)| {
                            acc - g * lw[(i, n_port + j)]
                        });
                    log_u.exp()
                })
                .collect();
            let (mean, stderr) = mean_and_stderr(&utilities);
            let analytic = (samples.horizon * ctx.evaluate(pi)?.h).exp();
            Ok(SimResult {
                weights: pi.as_slice().to_vec(),
                paths: lw.nrows(),
                mean_utility: mean,
                stderr,
                analytic,
                z_score: z_score(mean, analytic, stderr),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub perturbations: usize,
    pub radius: f64,
    pub paths: usize,
    pub candidate_value: f64,
    /// Directions where `H(candidate + d) > H(candidate)`.
    pub analytic_violations: usize,
    /// Directions where the Monte Carlo utility gain exceeds 3 standard errors.
    pub mc_violations: usize,
    pub max_analytic_gain: f64,
    pub max_mc_z: f64,
}

#[derive(Clone, Copy, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn merge(self, other: Moments) -> Moments {
        Moments {
            n: self.n + other.n,
            sum: self.sum + other.sum,
            sum_sq: self.sum_sq + other.sum_sq,
        }
    }
}

fn merge_tree(parts: &[Vec<Moments>]) -> Vec<Moments> {
    if parts.len() == 1 {
        return parts[0].clone();
    }
    let mid = parts.len() / 2;
    let (a, b) = (merge_tree(&parts[..mid]), merge_tree(&parts[mid..]));
    a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect()
}

/// Probes a candidate with `n_perturbations` random directions of norm
/// `radius`, comparing exact `H` values and paired Monte Carlo utilities.
pub fn verify_optimality(
    ctx: &ObjectiveContext,
    candidate: &Portfolio,
    cfg: &SimConfig,
    n_perturbations: usize,
    radius: f64,
) -> Result<OptimalityReport> {
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(Error::Parameter(format!(
            "radius must be non-negative, got {radius}"
        )));
    }
    let n = ctx.n_assets();
    let base_h = ctx.evaluate(candidate)?.h;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(DIRECTION_STREAM);
    let mut columns = vec![candidate.weights().clone()];
    for _ in 0..n_perturbations {
        let mut d: DVector<f64>;
        loop {
            d = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            if d.norm() > 0.0 {
                break;
            }
        }
        d *= radius / d.norm();
        columns.push(candidate.weights() + d);
    }

    let mut analytic_violations = 0;
    let mut max_analytic_gain = f64::NEG_INFINITY;
    for w in &columns[1..] {
        let gain = ctx.evaluate(&Portfolio::new(w.clone()))?.h - base_h;
        if gain > 0.0 {
            analytic_violations += 1;
        }
        max_analytic_gain = max_analytic_gain.max(gain);
    }

    let bench: Vec<DVector<f64>> = ctx.benchmarks().weights().to_vec();
    let n_port = columns.len();
    let all: Vec<DVector<f64>> = columns.into_iter().chain(bench).collect();
    let engine = PathEngine::new(ctx.model(), all, cfg)?;
    let gamma = ctx.gamma();
    let gammas = ctx.params().gammas().to_vec();

    let utility = |row: &[f64], p: usize| -> f64 {
        gammas
            .iter()
            .enumerate()
            .fold((1.0 - gamma) * row[p], |acc, (j, g)| {
                acc - g * row[n_port + j]
            })
            .exp()
    };

    let blocks = cfg.paths.div_ceil(BLOCK);
    let parts: Vec<Vec<Moments>> = cfg.run(|| {
        (0..blocks)
            .into_par_iter()
            .map(|b| {
                let mut acc = vec![Moments::default(); n_port - 1];
                for i in (b * BLOCK)..((b + 1) * BLOCK).min(cfg.paths) {
                    let row = engine.path(i);
                    let u0 = utility(&row, 0);
                    for (p, m) in acc.iter_mut().enumerate() {
                        let diff = utility(&row, p + 1) - u0;
                        m.n += 1.0;
                        m.sum += diff;
                        m.sum_sq += diff * diff;
                    }
                }
                acc
            })
            .collect()
    })?;

    let mut mc_violations = 0;
    let mut max_mc_z = f64::NEG_INFINITY;
    if n_perturbations > 0 {
        for m in merge_tree(&parts) {
            let mean = m.sum / m.n;
            let var = if m.n > 1.0 {
                ((m.sum_sq - m.sum * mean) / (m.n - 1.0)).max(0.0)
            } else {
                0.0
            };
            let stderr = (var / m.n).sqrt();
            let z = if stderr > 0.0 {
                mean / stderr
            } else if mean > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            if z > 3.0 {
                mc_violations += 1;
            }
            max_mc_z = max_mc_z.max(z);
        }
    }

    Ok(OptimalityReport {
        perturbations: n_perturbations,
        radius,
        paths: cfg.paths,
        candidate_value: base_h,
        analytic_violations,
        mc_violations,
        max_analytic_gain: if n_perturbations > 0 {
            max_analytic_gain
        } else {
            0.0
        },
        max_mc_z: if n_perturbations > 0 { max_mc_z } else { 0.0 },
    })
}

/// Simple per-period returns of each asset over `rows` periods of length `dt`.
pub fn simulate_returns(
    model: &MarketModel,
    dt: f64,
    rows: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<DMatrix<f64>> {
    let n = model.n_assets();
    // holding asset i alone makes portfolio wealth equal the asset's price
    let singles: Vec<Portfolio> = (0..n)
        .map(|i| {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            Portfolio::new(e)
        })
        .collect();
    let cfg = SimConfig {
        horizon: dt,
        steps: 1,
        paths: rows,
        seed,
        scheme: Scheme::ExactLog,
        workers,
    };
    let samples = simulate_terminal(model, &singles, &BenchmarkSet::empty(), &cfg)?;
    Ok(samples.log_wealth.map(f64::exp_m1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::UtilityParams;

    fn one_asset() -> MarketModel {
        MarketModel::from_rows(&[0.08], &[vec![0.04]], 0.02).unwrap()
    }

    fn cfg(paths: usize, seed: u64) -> SimConfig {
        SimConfig {
            paths,
            seed,
            ..SimConfig::default()
        }
    }

    #[test]
    fn pairwise_sum_small_and_large() {
        assert_eq!(pairwise_sum(&[]), 0.0);
        assert_eq!(pairwise_sum(&[1.0, 2.0, 3.0]), 6.0);
        let xs: Vec<f64> = (0..1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }

    #[test]
    fn cash_portfolio_is_deterministic() {
        let s = simulate_terminal(
            &one_asset(),
            &[Portfolio::zeros(1)],
            &BenchmarkSet::empty(),
            &SimConfig {
                horizon: 2.0,
                ..cfg(100, 3)
            },
        )
        .unwrap();
        assert!(s.log_wealth.iter().all(|x| *x == 0.02 * 2.0));
    }

    #[test]
    fn single_asset_lognormal_moments() {
        let s = simulate_terminal(
            &one_asset(),
            &[Portfolio::from_slice(&[1.0])],
            &BenchmarkSet::empty(),
            &cfg(100_000, 11),
        )
        .unwrap();
        let col: Vec<f64> = s.log_wealth.column(0).iter().copied().collect();
        let n = col.len() as f64;
        let mean = pairwise_sum(&col) / n;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expect_mean = 0.08 - 0.04 / 2.0;
        assert!((mean - expect_mean).abs() <= 4.0 * (0.04 / n).sqrt());
        assert!((var - 0.04).abs() <= 0.05 * 0.04);
    }

    #[test]
    fn euler_with_one_step_equals_exact() {
        let m = MarketModel::from_rows(&[0.08, 0.05], &[vec![0.04, 0.01], vec![0.01, 0.09]], 0.02)
            .unwrap();
        let pis = [
            Portfolio::from_slice(&[0.5, 0.7]),
            Portfolio::from_slice(&[-0.2, 1.1]),
        ];
        let exact = simulate_terminal(&m, &pis, &BenchmarkSet::empty(), &cfg(500, 5)).unwrap();
        let euler = simulate_terminal(
            &m,
            &pis,
            &BenchmarkSet::empty(),
            &SimConfig {
                scheme: Scheme::EulerLog,
                steps: 1,
                ..cfg(500, 5)
            },
        )
        .unwrap();
        assert_eq!(exact.log_wealth, euler.log_wealth);
    }

    #[test]
    fn euler_increments_sum_to_exact_update() {
        // With constant coefficients, summing Euler increments gives the exact
        // log-wealth for the aggregated Brownian increment.
        let m = MarketModel::from_rows(&[0.08, 0.05], &[vec![0.04, 0.01], vec![0.01, 0.09]], 0.02)
            .unwrap();
        let w = DVector::from_vec(vec![0.5, 0.7]);
        let steps = 64;
        let c = SimConfig {
            scheme: Scheme::EulerLog,
            steps,
            horizon: 1.5,
            ..cfg(10, 9)
        };
        let engine = PathEngine::new(&m, vec![w.clone()], &c).unwrap();
        let lower = cholesky_factor(m.covariance()).unwrap().lower().clone();
        for path in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            rng.set_stream(path);
            let scale = (1.5 / steps as f64).sqrt();
            let mut total = DVector::<f64>::zeros(2);
            let mut draws = Vec::new();
            for _ in 0..steps * 2 {
                let z: f64 = StandardNormal.sample(&mut rng);
                draws.push(scale * z);
            }
            for s in 0..steps {
                total[0] += draws[2 * s];
                total[1] += draws[2 * s + 1];
            }
            let exact = log_drift(&m, &w) * 1.5 + w.dot(&(&lower * total));
            let euler = engine.path(path as usize)[0];
            assert!((exact - euler).abs() < 1e-12, "{exact} vs {euler}");
        }
    }

    #[test]
    fn matching_benchmark_gives_unit_utility() {
        let params = UtilityParams::new(0.5, vec![0.5]).unwrap();
        let bench = BenchmarkSet::from_rows(&[vec![0.7]]).unwrap();
        let ctx = ObjectiveContext::new(one_asset(), params, bench.clone()).unwrap();
        let s = simulate_terminal(
            &one_asset(),
            &[Portfolio::from_slice(&[0.7])],
            &bench,
            &cfg(1000, 1),
        )
        .unwrap();
        let r = &estimate_expected_utility(&s, &ctx).unwrap()[0];
        assert_eq!(r.mean_utility, 1.0);
        assert_eq!(r.stderr, 0.0);
        assert_eq!(r.analytic, 1.0);
        assert_eq!(r.z_score, Some(0.0));
    }

    #[test]
    fn benchmark_count_must_match() {
        let params = UtilityParams::new(0.5, vec![0.5]).unwrap();
        let bench = BenchmarkSet::from_rows(&[vec![0.7]]).unwrap();
        let ctx = ObjectiveContext::new(one_asset(), params, bench).unwrap();
        let s = simulate_terminal(
            &one_asset(),
            &[Portfolio::from_slice(&[0.7])],
            &BenchmarkSet::empty(),
            &cfg(10, 1),
        )
        .unwrap();
        assert!(estimate_expected_utility(&s, &ctx).is_err());
    }

    #[test]
    fn config_errors() {
        let bad = [
            SimConfig {
                paths: 0,
                ..cfg(1, 1)
            },
            SimConfig {
                steps: 0,
                ..cfg(1, 1)
            },
            SimConfig {
                horizon: 0.0,
                ..cfg(1, 1)
            },
        ];
        for c in bad {
            assert!(simulate_terminal(&one_asset(), &[], &BenchmarkSet::empty(), &c).is_err());
        }
        let singular =
            MarketModel::from_rows(&[0.0, 0.0], &[vec![1.0, 1.0], vec![1.0, 1.0]], 0.0).unwrap();
        assert!(matches!(
            simulate_terminal(&singular, &[], &BenchmarkSet::empty(), &cfg(1, 1)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let m = MarketModel::from_rows(&[0.08, 0.05], &[vec![0.04, 0.01], vec![0.01, 0.09]], 0.02)
            .unwrap();
        let pis = [Portfolio::from_slice(&[0.5, 0.7])];
        let one = simulate_terminal(
            &m,
            &pis,
            &BenchmarkSet::empty(),
            &SimConfig {
                workers: Some(1),
                ..cfg(3000, 8)
            },
        )
        .unwrap();
        let many = simulate_terminal(
            &m,
            &pis,
            &BenchmarkSet::empty(),
            &SimConfig {
                workers: Some(4),
                ..cfg(3000, 8)
            },
        )
        .unwrap();
        assert_eq!(one.log_wealth, many.log_wealth);
    }

    #[test]
    fn zero_radius_has_no_violations() {
        let ctx = ObjectiveContext::classic(one_asset(), 0.5).unwrap();
        let rep = verify_optimality(&ctx, &Portfolio::from_slice(&[1.0]), &cfg(2000, 3), 20, 0.0)
            .unwrap();
        assert_eq!(rep.analytic_violations, 0);
        assert_eq!(rep.mc_violations, 0);
    }
}
