//! Acceptance gate: exact property checks plus qualitative rate checks at
//! desk scale. Each criterion prints a single pass/fail line.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tatonnement::demand::{demands, excess_demand, Bundle, Prices};
use tatonnement::duality::{
    grad_phi, hessian_phi, phi, phi_closed_form, psi, sample_simplex_price, solve_equilibrium,
};
use tatonnement::dynamics::{distort, run, InitMode, RunConfig, StopReason};
use tatonnement::fd;
use tatonnement::market::{Market, UtilitySpec};
use tatonnement::verify::{assert_invariants, check_def2, fit_rate, mwu_certificate};

const RHOS: [f64; 4] = [-2.0, -0.5, 0.5, 0.9];

/// The 20 seeded nested markets shared by criteria 1-3 and 6 (n, m <= 6).
fn criterion_markets() -> Vec<Market> {
    (0..20u64)
        .map(|s| {
            common::nested_market(s, 3 + (s % 3) as usize, 4 + (s % 3) as usize, 2, RHOS[(s % 4) as usize])
        })
        .collect()
}

fn price_points(market: &Market, seed: u64, count: usize) -> Vec<Prices> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| sample_simplex_price(market.good_count(), 0.05, &mut rng))
        .collect()
}

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {n:>2} {name}: {} ({detail})",
        if pass { "pass" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

// 1. Gradient identity: finite differences of phi match -z(p).
#[test]
fn criterion_01_gradient_identity() {
    let mut worst = 0.0f64;
    for (s, market) in criterion_markets().iter().enumerate() {
        for p in price_points(market, 1000 + s as u64, 5) {
            let fd_grad = fd::gradient(|q| phi(market, q).unwrap(), &p, 1e-6);
            let analytic = grad_phi(market, &p).unwrap();
            let scale = analytic.iter().map(|g| g.abs()).fold(1e-12, f64::max);
            let err = fd_grad
                .iter()
                .zip(&analytic)
                .map(|(f, a)| (f - a).abs())
                .fold(0.0, f64::max)
                / scale;
            worst = worst.max(err);
        }
    }
    report(1, "gradient-identity", worst <= 1e-4, &format!("max rel err {worst:.2e}"));
}

// 2. Analytic Hessian matches finite differences of grad_phi.
#[test]
fn criterion_02_hessian() {
    let mut worst = 0.0f64;
    for (s, market) in criterion_markets().iter().enumerate() {
        for p in price_points(market, 2000 + s as u64, 5) {
            let h = hessian_phi(market, &p).unwrap();
            let fd_h = fd::jacobian(|q| grad_phi(market, q).unwrap(), &p, 1e-5);
            let hmax = h.iter().map(|v| v.abs()).fold(1e-12, f64::max);
            for (j, row) in fd_h.iter().enumerate() {
                for (l, f) in row.iter().enumerate() {
                    let a = h[(j, l)];
                    let err = (f - a).abs() / a.abs().max(0.01 * hmax);
                    worst = worst.max(err);
                }
            }
        }
    }
    report(2, "hessian", worst <= 1e-3, &format!("max rel err {worst:.2e}"));
}

// 3. Closed-form dual equals the maximizer-route dual.
#[test]
fn criterion_03_dual_cross_check() {
    let mut worst = 0.0f64;
    for (s, market) in criterion_markets().iter().enumerate() {
        for p in price_points(market, 3000 + s as u64, 5) {
            let a = phi(market, &p).unwrap();
            let b = phi_closed_form(market, &p).unwrap();
            worst = worst.max((a - b).abs());
        }
    }
    report(3, "dual-cross-check", worst <= 1e-9, &format!("max abs err {worst:.2e}"));
}

// 4. Simplex invariance over 1e5 rounds.
#[test]
fn criterion_04_simplex_invariance() {
    let market = common::nested_market(77, 4, 5, 2, 0.5);
    let config = RunConfig {
        epsilon: Some(0.05),
        delta: 1e-15, // unattainable: force the full horizon
        max_iters: 100_000,
        ..Default::default()
    };
    let (trace, result) = run(&market, &config).unwrap();
    assert!(matches!(result.stopping_reason, StopReason::MaxIters));
    let worst = trace
        .rounds
        .iter()
        .map(|r| (r.p.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let pass = trace.rounds.len() >= 100_000 && worst <= 1e-10;
    report(4, "simplex-invariance", pass, &format!("max |sum p - 1| {worst:.2e} over {} rounds", trace.rounds.len()));
}

// 5. Cobb-Douglas converges in one step with eps = 1.
#[test]
fn criterion_05_cobb_douglas_one_step() {
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let market = common::cobb_douglas_market(seed, 4, 5);
        let config = RunConfig {
            epsilon: Some(1.0),
            delta: 1e-9,
            init: InitMode::Uniform,
            ..Default::default()
        };
        let (trace, result) = run(&market, &config).unwrap();
        assert!(result.converged, "seed {seed}");
        // p*_j = sum_i b_i c_ij
        let mut p_star = vec![0.0; market.good_count()];
        for agent in &market.agents {
            let UtilitySpec::CobbDouglas { c } = &agent.utility else { unreachable!() };
            for (ps, cj) in p_star.iter_mut().zip(c) {
                *ps += agent.budget * cj;
            }
        }
        let p1 = &trace.rounds[1].p;
        let dev = p1
            .iter()
            .zip(&p_star)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(dev);
    }
    report(5, "cobb-douglas-one-step", worst <= 1e-12, &format!("max |p1 - p*| {worst:.2e}"));
}

// 6. Dual monotonicity with the chosen step size.
#[test]
fn criterion_06_dual_monotonicity() {
    let mut total_violations = 0usize;
    for market in criterion_markets() {
        let config = RunConfig {
            epsilon: None, // choose_epsilon from estimated bounds
            delta: 1e-6,
            max_iters: 50_000,
            ..Default::default()
        };
        let (trace, result) = run(&market, &config).unwrap();
        let inv = assert_invariants(&trace, &market);
        total_violations += inv.monotonicity_violations;
        assert!(inv.simplex_violation.is_none() && inv.positivity_violation.is_none());
        let _ = result;
    }
    report(6, "dual-monotonicity", total_violations == 0, &format!("{total_violations} violations beyond 1e-12"));
}

// 7. Geometric decay of the dual gap on CES markets.
#[test]
fn criterion_07_geometric_decay() {
    let mut worst_rate = 0.0f64;
    let mut worst_quality = 0.0f64;
    for (seed, rho) in [(1u64, -0.5), (2, -0.5), (3, 0.5), (4, 0.5)] {
        let market = common::ces_market(seed, 4, 5, rho);
        let oracle = solve_equilibrium(&market, 1e-10).unwrap();
        let config = RunConfig {
            epsilon: None,
            delta: 1e-4,
            max_iters: 200_000,
            ..Default::default()
        };
        let (trace, result) = run(&market, &config).unwrap();
        assert!(result.converged, "seed {seed} rho {rho}");
        let fit = fit_rate(&trace, oracle.dual_value).unwrap();
        worst_rate = worst_rate.max(fit.rate);
        worst_quality = worst_quality.max(fit.residual / fit.log_range);
    }
    let pass = worst_rate <= 0.9999 && worst_quality <= 0.05;
    report(7, "geometric-decay", pass, &format!("max rate {worst_rate:.6}, max residual/range {worst_quality:.3}"));
}

fn criterion_08_markets() -> Vec<Market> {
    vec![
        common::nested_market(101, 4, 5, 2, 0.5),
        common::nested_market(102, 3, 4, 2, -0.5),
        common::leontief_market(103, 3, 4),
        common::leontief_market(104, 4, 5),
    ]
}

// 8. Definition-1 pass at delta = 1e-2 within 1e6 rounds, price close to
// the oracle equilibrium. Criterion 9 reuses these runs.
#[test]
fn criterion_08_and_09_convergence_and_mwu() {
    let mut worst_dev = 0.0f64;
    let mut all_converged = true;
    let mut mwu_ok = true;
    for market in criterion_08_markets() {
        let config = RunConfig {
            epsilon: None,
            delta: 1e-2,
            max_iters: 1_000_000,
            ..Default::default()
        };
        let (trace, result) = run(&market, &config).unwrap();
        all_converged &= result.converged;
        let oracle = solve_equilibrium(&market, 1e-9).unwrap();
        let p_final = &trace.rounds.last().unwrap().p;
        let dev = p_final
            .iter()
            .zip(&oracle.p_star.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_dev = worst_dev.max(dev);

        let cert = mwu_certificate(&trace);
        mwu_ok &= cert.applicable && cert.holds;
    }
    let pass8 = all_converged && worst_dev <= 5e-2;
    report(8, "def1-convergence", pass8, &format!("all converged: {all_converged}, max |p - p*| {worst_dev:.2e}"));
    report(9, "mwu-bound", mwu_ok, "prefix-average inequality on all criterion-8 runs");
}

// 10. Resource allocation via distortion, checked against Definition 2.
#[test]
fn criterion_10_resource_allocation() {
    let delta = 0.1;
    let mut all_pass = true;
    for (seed, k) in [(11u64, 2), (12, 3), (13, 2), (14, 3), (15, 2)] {
        let market = common::resource_allocation_market(seed, 3, 4, k);
        let distorted = distort(&market, delta).unwrap();
        let config = RunConfig {
            epsilon: None,
            delta: delta / 2.0,
            max_iters: 1_000_000,
            ..Default::default()
        };
        let (trace, result) = run(&distorted, &config).unwrap();
        assert!(result.converged, "seed {seed}");
        let p = Prices(trace.rounds.last().unwrap().p.clone());
        // the proof construction: scale demands down to guarantee feasibility
        let x: Vec<Bundle> = demands(&distorted, &p)
            .unwrap()
            .iter()
            .map(|b| b.scaled(1.0 / (1.0 + delta / 2.0)))
            .collect();
        let rep = check_def2(&distorted, &p, &x, delta).unwrap();
        all_pass &= rep.overall;
    }
    report(10, "resource-allocation", all_pass, "check_def2 at delta=0.1 on 5 distorted markets");
}

// 11. Oracle sanity: small residuals everywhere, weak duality on random
// feasible pairs.
#[test]
fn criterion_11_oracle_sanity() {
    let mut markets = criterion_markets();
    markets.extend(criterion_08_markets());
    markets.push(common::cobb_douglas_market(7, 4, 5));
    markets.push(common::ces_market(8, 4, 5, -0.5));
    markets.push(distort(&common::resource_allocation_market(9, 3, 4, 2), 0.1).unwrap());

    let mut worst_residual = 0.0f64;
    for market in &markets {
        let oracle = solve_equilibrium(market, 1e-7).unwrap();
        assert!(oracle.converged);
        // boundary goods (z_j < 0 at p_j <= tol, condition iv) are excluded
        // from the residual, matching the solver's invariant
        let z = excess_demand(market, &oracle.p_star).unwrap();
        let res = z
            .z
            .iter()
            .zip(&oracle.p_star.0)
            .map(|(&zj, &pj)| if zj > 0.0 || pj > 1e-7 { zj.abs() } else { 0.0 })
            .fold(0.0, f64::max);
        worst_residual = worst_residual.max(res);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1_100);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut pairs = 0;
    'outer: loop {
        for market in &markets {
            let m = market.good_count();
            let q = sample_simplex_price(m, 0.02, &mut rng);
            let p = sample_simplex_price(m, 0.02, &mut rng);
            let x = demands(market, &q).unwrap();
            let max_agg = (0..m)
                .map(|j| x.iter().map(|b| b.x[j]).sum::<f64>())
                .fold(0.0, f64::max);
            let feasible: Vec<Bundle> =
                x.iter().map(|b| b.scaled(1.0 / max_agg.max(1.0))).collect();
            let primal = psi(market, &feasible).unwrap();
            let dual = phi(market, &p).unwrap();
            worst_gap = worst_gap.max(primal - dual);
            pairs += 1;
            if pairs >= 1000 {
                break 'outer;
            }
        }
    }
    let pass = worst_residual <= 1e-7 && worst_gap <= 1e-9;
    report(11, "oracle-sanity", pass, &format!("max residual {worst_residual:.2e}, max psi-phi {worst_gap:.2e} over {pairs} pairs"));
}
