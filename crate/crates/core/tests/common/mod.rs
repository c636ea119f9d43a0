#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use relwealth::{BenchmarkSet, CapmModel, MarketModel, ObjectiveContext, UtilityParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

/// Random orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

/// Symmetric positive definite matrix with eigenvalues drawn from `[lo, hi]`.
pub fn spd(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let q = orthogonal(rng, n);
    let d = DVector::from_fn(n, |_, _| uniform(rng, lo, hi));
    let a = &q * DMatrix::from_diagonal(&d) * q.transpose();
    (&a + a.transpose()) * 0.5
}

pub struct Instance {
    pub model: MarketModel,
    pub gamma: f64,
    pub gammas: Vec<f64>,
    pub benchmarks: Vec<Vec<f64>>,
}

impl Instance {
    pub fn context(&self) -> ObjectiveContext {
        let params = UtilityParams::new(self.gamma, self.gammas.clone()).unwrap();
        let bench = BenchmarkSet::from_rows(&self.benchmarks).unwrap();
        ObjectiveContext::new(self.model.clone(), params, bench).unwrap()
    }

    pub fn n(&self) -> usize {
        self.model.n_assets()
    }
}

/// N in 1..=6, k in 0..=3, γ in [0.1, 0.9], eigenvalues of A in [0.01, 0.5].
pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let n = r.random_range(1..=6);
    let k = r.random_range(0..=3);
    let gamma = uniform(&mut r, 0.1, 0.9);
    let cov = spd(&mut r, n, 0.01, 0.5);
    let rf = uniform(&mut r, 0.0, 0.05);
    let drift = DVector::from_fn(n, |_, _| rf + uniform(&mut r, -0.05, 0.15));
    let gammas = (0..k).map(|_| uniform(&mut r, 0.0, 0.5)).collect();
    let benchmarks = (0..k)
        .map(|_| (0..n).map(|_| uniform(&mut r, -0.5, 1.5)).collect())
        .collect();
    Instance {
        model: MarketModel::new(drift, cov, rf).unwrap(),
        gamma,
        gammas,
        benchmarks,
    }
}

/// Market with weights of order one, used where absolute tolerances are tight.
pub fn moderate_instance(seed: u64, n: usize) -> MarketModel {
    let mut r = rng(seed);
    let cov = spd(&mut r, n, 0.05, 0.3);
    let rf = uniform(&mut r, 0.0, 0.04);
    let drift = DVector::from_fn(n, |_, _| rf + uniform(&mut r, 0.0, 0.08));
    MarketModel::new(drift, cov, rf).unwrap()
}

pub fn random_capm(seed: u64) -> CapmModel {
    let mut r = rng(seed);
    let n = r.random_range(1..=5);
    let rf = uniform(&mut r, 0.0, 0.04);
    let mu = rf + uniform(&mut r, 0.03, 0.1);
    let sigma = uniform(&mut r, 0.1, 0.3);
    let betas = DVector::from_fn(n, |_, _| uniform(&mut r, 0.2, 1.6));
    let resid = spd(&mut r, n, 0.01, 0.1);
    CapmModel::new(mu, sigma, rf, betas, resid).unwrap()
}

/// Independent solve of `A x = y` by LU, for use as a test-side oracle.
pub fn lu_solve(a: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    a.clone().lu().solve(y).expect("nonsingular")
}
