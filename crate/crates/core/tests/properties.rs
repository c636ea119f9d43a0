mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use common::{random_capm, random_instance, rng, spd, uniform};
use relwealth::io::{parse_problem, spec_from_market};
use relwealth::{
    assemble_capm_investable, assemble_capm_noninvestable, capm_constrained_investable,
    capm_constrained_noninvestable, cholesky_factor, combined_utility, grad_h, merton_optimal,
    objective_h, simulate_terminal, validate_market, BenchmarkSet, MarketModel, ObjectiveContext,
    Portfolio, Severity, SimConfig, UtilityParams, DEFAULT_ELLIPTICITY_FLOOR,
};

fn vec_in(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, n)
}

/// Instance with up to eight assets and three benchmarks.
fn wide_instance(seed: u64) -> ObjectiveContext {
    let mut r = rng(seed);
    let n = r.random_range(1..=8);
    let k = r.random_range(0..=3);
    let cov = spd(&mut r, n, 0.01, 0.5);
    let rf = uniform(&mut r, 0.0, 0.05);
    let drift = DVector::from_fn(n, |_, _| rf + uniform(&mut r, -0.05, 0.15));
    let gammas = (0..k).map(|_| uniform(&mut r, -0.2, 0.5)).collect();
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..n).map(|_| uniform(&mut r, -0.5, 1.5)).collect())
        .collect();
    ObjectiveContext::new(
        MarketModel::new(drift, cov, rf).unwrap(),
        UtilityParams::new(uniform(&mut r, 0.05, 0.95), gammas).unwrap(),
        BenchmarkSet::from_rows(&rows).unwrap(),
    )
    .unwrap()
}

fn h(ctx: &ObjectiveContext, w: &DVector<f64>) -> f64 {
    objective_h(&Portfolio::new(w.clone()), ctx).unwrap().h
}

proptest! {
    #[test]
    fn second_difference_is_exact(seed in 0u64..10_000, raw in vec_in(8, -2.0, 2.0), dir in vec_in(8, -1.0, 1.0)) {
        let ctx = wide_instance(seed);
        let n = ctx.n_assets();
        let pi = DVector::from_column_slice(&raw[..n]);
        let d = DVector::from_column_slice(&dir[..n]);
        prop_assume!(d.norm() > 1e-3);
        let second = h(&ctx, &(&pi + &d)) - 2.0 * h(&ctx, &pi) + h(&ctx, &(&pi - &d));
        let g = ctx.gamma();
        let expect = -g * (1.0 - g) * d.dot(&(ctx.model().covariance() * &d));
        prop_assert!((second - expect).abs() <= 1e-9 * expect.abs());
    }

    #[test]
    fn gradient_vanishes_at_closed_form(seed in 0u64..10_000) {
        let ctx = wide_instance(seed);
        let sol = merton_optimal(&ctx).unwrap();
        let grad = grad_h(&sol.portfolio, &ctx).unwrap();
        prop_assert!(grad.amax() <= 1e-10 * (1.0 + ctx.model().drift().norm()));
    }

    #[test]
    fn relative_variance_term_is_non_negative(seed in 0u64..10_000, raw in vec_in(8, -3.0, 3.0)) {
        let ctx = wide_instance(seed);
        let n = ctx.n_assets();
        let v = objective_h(&Portfolio::from_slice(&raw[..n]), &ctx).unwrap();
        prop_assert!(v.g >= 0.0);
        prop_assert!((v.h - (v.f + 0.5 * v.g)).abs() <= 1e-12 * (1.0 + v.h.abs()));
    }

    #[test]
    fn relative_variance_vanishes_on_the_kernel(seed in 0u64..10_000) {
        let ctx = wide_instance(seed);
        // v(π) = (1−γ)π − Σγ_jρ_j = 0
        let pi = ctx.benchmark_sum() / (1.0 - ctx.gamma());
        let v = objective_h(&Portfolio::new(pi), &ctx).unwrap();
        let scale = ctx.benchmark_sum().norm_squared() * ctx.model().covariance().norm();
        prop_assert!(v.g.abs() <= 1e-13 * (1.0 + scale));
    }

    #[test]
    fn benchmark_shift(seed in 0u64..10_000) {
        let inst = random_instance(seed);
        let ctx = inst.context();
        let with = merton_optimal(&ctx).unwrap();
        let without = merton_optimal(&ctx.without_benchmarks()).unwrap();
        let shift = ctx.benchmark_sum() / inst.gamma;
        let diff = with.portfolio.weights() - without.portfolio.weights() + &shift;
        let scale = 1.0 + without.portfolio.weights().amax() + shift.amax();
        prop_assert!(diff.amax() <= 4.0 * f64::EPSILON * scale);
    }

    #[test]
    fn cholesky_reconstructs_and_is_idempotent(seed in 0u64..10_000, n in 1usize..9) {
        let mut r = rng(seed);
        let a = spd(&mut r, n, 1e-3, 2.0);
        let f = cholesky_factor(&a).unwrap();
        let back = f.reconstruct();
        prop_assert!((&back - &a).amax() <= 1e-10 * a.amax());
        let again = cholesky_factor(&back).unwrap();
        prop_assert!((again.lower() - f.lower()).amax() <= 1e-10);
        prop_assert!(f.min_pivot() > 0.0);
    }

    #[test]
    fn construction_symmetrizes(seed in 0u64..10_000, n in 1usize..7) {
        let mut r = rng(seed);
        let mut a = spd(&mut r, n, 0.01, 1.0);
        for i in 0..n {
            for j in 0..i {
                a[(i, j)] += uniform(&mut r, -1e-9, 1e-9);
            }
        }
        let m = MarketModel::new(DVector::zeros(n), a, 0.0).unwrap();
        let c = m.covariance();
        prop_assert_eq!((c - c.transpose()).amax(), 0.0);
    }

    #[test]
    fn ok_iff_no_error_finding(seed in 0u64..10_000, n in 1usize..5, shift in -0.5f64..0.5) {
        let mut r = rng(seed);
        let a = spd(&mut r, n, 0.01, 0.5) + DMatrix::identity(n, n) * shift;
        let m = MarketModel::new(DVector::from_element(n, 0.05), a, 0.01).unwrap();
        let rep = validate_market(&m, DEFAULT_ELLIPTICITY_FLOOR);
        let errors = rep.findings.iter().any(|f| f.severity == Severity::Error);
        prop_assert_eq!(rep.ok, !errors);
    }

    #[test]
    fn assembled_capm_models_are_valid_and_pure(seed in 0u64..10_000) {
        let c = random_capm(seed);
        let a1 = assemble_capm_investable(&c).unwrap();
        let a2 = assemble_capm_investable(&c).unwrap();
        let b1 = assemble_capm_noninvestable(&c).unwrap();
        let b2 = assemble_capm_noninvestable(&c).unwrap();
        prop_assert!(validate_market(&a1, DEFAULT_ELLIPTICITY_FLOOR).ok);
        prop_assert!(validate_market(&b1, DEFAULT_ELLIPTICITY_FLOOR).ok);
        prop_assert_eq!(a1, a2);
        prop_assert_eq!(b1, b2);
    }

    #[test]
    fn investable_capm_stationarity(seed in 0u64..10_000, gamma in 0.1f64..0.9, g1 in 0.0f64..0.5, beta0 in 0.3f64..1.7) {
        let c = random_capm(seed);
        let n = c.n_assets();
        let mut r = rng(seed ^ 0xabcd);
        let rho: Vec<f64> = (0..=n).map(|_| uniform(&mut r, -0.5, 1.0)).collect();
        let params = UtilityParams::new(gamma, vec![g1]).unwrap();
        let bench = BenchmarkSet::from_rows(&[rho]).unwrap();
        let sol = capm_constrained_investable(&c, &params, &bench, beta0, 1e-8).unwrap();
        let ctx = ObjectiveContext::new(assemble_capm_investable(&c).unwrap(), params, bench).unwrap();
        let mut row = DVector::zeros(n + 1);
        row[0] = 1.0;
        row.rows_mut(1, n).copy_from(c.betas());
        let grad = grad_h(&sol.portfolio, &ctx).unwrap();
        let stat = grad + &row * sol.lagrange_multiplier.unwrap();
        prop_assert!(stat.amax() <= 1e-8);
        prop_assert!((row.dot(sol.portfolio.weights()) - beta0).abs() <= 1e-10);
    }

    #[test]
    fn noninvestable_capm_stationarity(seed in 0u64..10_000, gamma in 0.1f64..0.9, g1 in 0.0f64..0.5, beta0 in 0.3f64..1.7) {
        let c = random_capm(seed);
        let n = c.n_assets();
        let mut r = rng(seed ^ 0x1234);
        let rho: Vec<f64> = (0..n).map(|_| uniform(&mut r, -0.5, 1.0)).collect();
        let params = UtilityParams::new(gamma, vec![g1]).unwrap();
        let bench = BenchmarkSet::from_rows(&[rho]).unwrap();
        let sol = capm_constrained_noninvestable(&c, &params, &bench, beta0, 1e-8).unwrap();
        let ctx = ObjectiveContext::new(assemble_capm_noninvestable(&c).unwrap(), params, bench).unwrap();
        let grad = grad_h(&sol.portfolio, &ctx).unwrap();
        let stat = grad + c.betas() * sol.lagrange_multiplier.unwrap();
        prop_assert!(stat.amax() <= 1e-8);
        prop_assert!((c.betas().dot(sol.portfolio.weights()) - beta0).abs() <= 1e-10);
        prop_assert!(sol.check(relwealth::ClosedForm::NoninvestablePreCancellation).unwrap().matches);
    }

    #[test]
    fn benchmark_plus_cash_keeps_only_the_benchmark(seed in 0u64..10_000, gamma in 0.1f64..0.9, g1 in 0.0f64..1.0, theta in 0.0f64..=1.0) {
        let c = random_capm(seed);
        let mut rho = vec![0.0; c.n_assets() + 1];
        rho[0] = theta;
        let params = UtilityParams::new(gamma, vec![g1]).unwrap();
        let sol = capm_constrained_investable(&c, &params, &BenchmarkSet::from_rows(&[rho]).unwrap(), 1.0, 1e-8).unwrap();
        prop_assert!(sol.risky_weights().amax() <= 1e-10);
        prop_assert!((sol.benchmark_weight.unwrap() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn classic_utility_is_a_power(v in 1e-3f64..1e3, gamma in 0.01f64..0.99) {
        let p = UtilityParams::new(gamma, vec![]).unwrap();
        let u = combined_utility(v, &[], &p).unwrap();
        let expect = ((1.0 - gamma) * v.ln()).exp();
        prop_assert!((u - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn spec_text_round_trip(seed in 0u64..10_000, gamma in 0.05f64..0.95) {
        let inst = random_instance(seed);
        let spec = spec_from_market(&inst.model, gamma);
        let text = spec.to_toml_string().unwrap();
        let back = parse_problem(&text).unwrap();
        prop_assert_eq!(back, spec);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulation_is_independent_of_worker_count(seed in any::<u64>(), workers in 2usize..6) {
        let ctx = wide_instance(seed % 1000);
        let n = ctx.n_assets();
        let pi = Portfolio::new(DVector::from_element(n, 0.3));
        let cfg = |w| SimConfig { paths: 3000, steps: 3, seed, workers: Some(w), ..SimConfig::default() };
        let a = simulate_terminal(ctx.model(), std::slice::from_ref(&pi), ctx.benchmarks(), &cfg(1)).unwrap();
        let b = simulate_terminal(ctx.model(), &[pi], ctx.benchmarks(), &cfg(workers)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn common_random_numbers_variance(seed in any::<u64>()) {
        let ctx = wide_instance(seed % 1000);
        let n = ctx.n_assets();
        let mut r = rng(seed);
        let a = DVector::from_fn(n, |_, _| uniform(&mut r, -1.0, 1.0));
        let b = DVector::from_fn(n, |_, _| uniform(&mut r, -1.0, 1.0));
        let cfg = SimConfig { paths: 40_000, horizon: 2.0, seed, ..SimConfig::default() };
        let s = simulate_terminal(
            ctx.model(),
            &[Portfolio::new(a.clone()), Portfolio::new(b.clone())],
            &BenchmarkSet::empty(),
            &cfg,
        )
        .unwrap();
        let diff: Vec<f64> = (0..s.paths()).map(|i| s.log_wealth[(i, 0)] - s.log_wealth[(i, 1)]).collect();
        let mean = diff.iter().sum::<f64>() / diff.len() as f64;
        let var = diff.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (diff.len() - 1) as f64;
        let d = &a - &b;
        let expect = d.dot(&(ctx.model().covariance() * &d)) * cfg.horizon;
        prop_assert!((var - expect).abs() <= 0.05 * expect);
    }
}
