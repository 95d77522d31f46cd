//! The discrete tatonnement process: p^{t+1}_j = p^t_j (1 + eps z_j(p^t)),
//! round traces, step-size selection, and the distortion transform that
//! turns resource-allocation utilities into runnable nested CES-Leontief.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::demand::{excess_from_bundles, demands, DemandError, ExcessDemand, Prices};
use crate::duality::{phi, BoundsEstimate, DualityError};
use crate::market::{Agent, Market, MarketError, UtilitySpec};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error(transparent)]
    Duality(#[from] DualityError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error("epsilon {0} outside (0, 1]")]
    BadEpsilon(f64),
    #[error("delta must be positive, got {0}")]
    BadDelta(f64),
    #[error("explicit initial prices have a non-positive entry at index {0}")]
    BadInitialPrice(usize),
    #[error("initial price vector has {got} entries, market has {want} goods")]
    InitLengthMismatch { got: usize, want: usize },
    #[error("non-finite price at round {round}: numeric blow-up")]
    NumericBlowup { round: usize },
    #[error("distort requires resource_allocation utilities, agent {0} is {1}")]
    NotResourceAllocation(usize, &'static str),
    #[error("distort undefined for k = 1 (single-object agents are already Leontief)")]
    SingleObject,
    #[error("distortion delta {0} outside (0, 1)")]
    BadDistortionDelta(f64),
    #[error("empty averaging window")]
    EmptyWindow,
}

// ---------------------------------------------------------------------------
// Single price update
// ---------------------------------------------------------------------------

/// One tatonnement update: p'_j = p_j (1 + eps z_j). Positivity is
/// preserved for eps < 1 since 1 + eps z_j >= 1 - eps > 0.
pub fn step(p: &Prices, z: &ExcessDemand, epsilon: f64) -> Prices {
    Prices(
        p.0.iter()
            .zip(&z.z)
            .map(|(&pj, &zj)| pj * (1.0 + epsilon * zj))
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Initial prices
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum InitMode {
    Uniform,
    /// Arbitrary positive start, then each price reset to the total money
    /// spent on the good; the reset lands in B.
    SpendReset,
    Explicit(Vec<f64>),
}

/// Initial price vector in B. Returns the prices and whether an explicit
/// vector had to be renormalized onto the simplex.
pub fn init_prices(
    market: &Market,
    mode: &InitMode,
    rng: &mut impl Rng,
) -> Result<(Prices, bool), DynamicsError> {
    let m = market.good_count();
    match mode {
        InitMode::Uniform => Ok((Prices::uniform(m), false)),
        InitMode::SpendReset => {
            let start = Prices((0..m).map(|_| 0.1 + 0.9 * rng.gen::<f64>()).collect());
            let bundles = demands(market, &start)?;
            let mut spend = vec![0.0; m];
            for b in &bundles {
                for (s, (&xj, &pj)) in spend.iter_mut().zip(b.x.iter().zip(&start.0)) {
                    *s += xj * pj;
                }
            }
            Ok((Prices(spend), false))
        }
        InitMode::Explicit(v) => {
            if v.len() != m {
                return Err(DynamicsError::InitLengthMismatch { got: v.len(), want: m });
            }
            if let Some(j) = v.iter().position(|&pj| pj.is_nan() || pj <= 0.0) {
                return Err(DynamicsError::BadInitialPrice(j));
            }
            let sum: f64 = v.iter().sum();
            let off_simplex = (sum - 1.0).abs() > 1e-10;
            Ok((Prices(v.iter().map(|pj| pj / sum).collect()), off_simplex))
        }
    }
}

// ---------------------------------------------------------------------------
// Step-size selection
// ---------------------------------------------------------------------------

/// Conservative fixed step from empirical bounds:
/// eps = min(0.25, 1/(2W), 1/(L_max A), 1/(2 lambda_max)).
pub fn choose_epsilon(bounds: &BoundsEstimate) -> f64 {
    let mut eps = 0.25f64;
    eps = eps.min(1.0 / (2.0 * bounds.w));
    if let Some(l_max) = bounds.l_est_max {
        if l_max > 0.0 {
            eps = eps.min(1.0 / (l_max * bounds.a_max));
        }
    }
    if let Some(lambda) = bounds.lambda_est_max {
        if lambda > 0.0 {
            eps = eps.min(1.0 / (2.0 * lambda));
        }
    }
    eps
}

// ---------------------------------------------------------------------------
// Run configuration, trace, and the main loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    /// None selects epsilon automatically via `estimate_bounds` + `choose_epsilon`.
    pub epsilon: Option<f64>,
    /// Definition-1 approximation target.
    pub delta: f64,
    pub max_iters: usize,
    pub init: InitMode,
    /// Rounds between full Definition-1 checks.
    pub check_every: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epsilon: None,
            delta: 1e-3,
            max_iters: 1_000_000,
            init: InitMode::Uniform,
            check_every: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Round {
    pub t: usize,
    pub p: Vec<f64>,
    pub z: Vec<f64>,
    pub phi: f64,
    /// Per-good spend p_j f_j(p).
    pub spend: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Trace {
    pub rounds: Vec<Round>,
    pub epsilon: f64,
    pub market_hash: String,
}

impl Trace {
    /// Trace CSV, one row per recorded round, full (17 significant digit)
    /// precision. Header: t,phi,max_excess,min_price,p_<good>...,z_<good>...
    pub fn to_csv(&self, goods: &[String]) -> String {
        let mut out = String::from("t,phi,max_excess,min_price");
        for g in goods {
            out.push_str(&format!(",p_{g}"));
        }
        for g in goods {
            out.push_str(&format!(",z_{g}"));
        }
        out.push('\n');
        for r in &self.rounds {
            let max_excess = r.z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min_price = r.p.iter().cloned().fold(f64::INFINITY, f64::min);
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e}",
                r.t, r.phi, max_excess, min_price
            ));
            for pj in &r.p {
                out.push_str(&format!(",{pj:.16e}"));
            }
            for zj in &r.z {
                out.push_str(&format!(",{zj:.16e}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIters,
    Diverged,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub converged: bool,
    pub rounds: usize,
    /// Definition-1 level certified at the final round, if any.
    pub delta_achieved: Option<f64>,
    pub epsilon_used: f64,
    pub phi_final: f64,
    pub stopping_reason: StopReason,
    /// Rounds where phi increased beyond 1e-9 (warning-level events).
    pub monotonicity_warnings: usize,
}

/// Consecutive phi increases beyond this trigger the divergence stop.
const DIVERGENCE_RUN: usize = 100;
const DIVERGENCE_TOL: f64 = 1e-9;

/// Cheap Definition-1 test at a demand point: P1 holds by construction
/// (x = x(p)), so only P2 and P3 are examined.
fn def1_at_demand(p: &Prices, z: &[f64], delta: f64) -> bool {
    z.iter()
        .zip(&p.0)
        .all(|(&zj, &pj)| zj <= delta && (zj >= -delta || pj <= delta))
}

/// Run the synchronous dynamics: demands -> excess -> price update, with a
/// Definition-1 check every `check_every` rounds (and opportunistically when
/// the excess is already small).
pub fn run(market: &Market, config: &RunConfig) -> Result<(Trace, RunResult), DynamicsError> {
    if market
        .agents
        .iter()
        .any(|a| matches!(a.utility, UtilitySpec::ResourceAllocation { .. }))
    {
        return Err(DemandError::DistortFirst.into());
    }
    if config.delta <= 0.0 {
        return Err(DynamicsError::BadDelta(config.delta));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let epsilon = match config.epsilon {
        Some(e) => e,
        None => {
            let bounds = crate::duality::estimate_bounds(market, 200, config.seed)?;
            choose_epsilon(&bounds)
        }
    };
    // the paper's guarantee needs eps < 1/2, but eps = 1 is meaningful for
    // Cobb-Douglas (one-step convergence), so the mechanics accept (0, 1]
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(DynamicsError::BadEpsilon(epsilon));
    }

    let (mut p, _warned) = init_prices(market, &config.init, &mut rng)?;
    let check_every = config.check_every.max(1);

    let mut trace = Trace {
        rounds: Vec::new(),
        epsilon,
        market_hash: market.hash(),
    };

    let mut prev_phi = f64::INFINITY;
    let mut increase_streak = 0usize;
    let mut warnings = 0usize;
    let mut result: Option<(StopReason, Option<f64>)> = None;
    let mut t = 0usize;

    loop {
        if p.0.iter().any(|pj| !pj.is_finite()) {
            return Err(DynamicsError::NumericBlowup { round: t });
        }
        let bundles = demands(market, &p)?;
        let ed = excess_from_bundles(&bundles, p.len());
        let phi_t = phi(market, &p)?;
        let spend: Vec<f64> =
            p.0.iter().zip(&ed.z).map(|(&pj, &zj)| pj * (zj + 1.0)).collect();
        trace.rounds.push(Round {
            t,
            p: p.0.clone(),
            z: ed.z.clone(),
            phi: phi_t,
            spend,
        });

        if phi_t > prev_phi + DIVERGENCE_TOL {
            warnings += 1;
            increase_streak += 1;
        } else {
            increase_streak = 0;
        }
        prev_phi = phi_t;

        if (t.is_multiple_of(check_every) || ed.linf() <= config.delta)
            && def1_at_demand(&p, &ed.z, config.delta)
        {
            result = Some((StopReason::Converged, Some(config.delta)));
        }
        if result.is_none() && increase_streak >= DIVERGENCE_RUN {
            result = Some((StopReason::Diverged, None));
        }
        if result.is_none() && t + 1 >= config.max_iters {
            result = Some((StopReason::MaxIters, None));
        }
        if let Some((reason, delta_achieved)) = result {
            let run_result = RunResult {
                converged: reason == StopReason::Converged,
                rounds: t,
                delta_achieved,
                epsilon_used: epsilon,
                phi_final: phi_t,
                stopping_reason: reason,
                monotonicity_warnings: warnings,
            };
            return Ok((trace, run_result));
        }

        p = step(&p, &ed, epsilon);
        t += 1;
    }
}

// ---------------------------------------------------------------------------
// Distortion transform (resource allocation -> nested CES-Leontief)
// ---------------------------------------------------------------------------

/// Replace resource-allocation utilities by their distorted CES versions
/// with rho = 1 - delta/(4 ln k), k = max_i |J_i|, then renormalize.
pub fn distort(market: &Market, delta: f64) -> Result<Market, DynamicsError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(DynamicsError::BadDistortionDelta(delta));
    }
    let mut k = 0usize;
    for (i, agent) in market.agents.iter().enumerate() {
        match &agent.utility {
            UtilitySpec::ResourceAllocation { objects } => k = k.max(objects.len()),
            other => {
                return Err(DynamicsError::NotResourceAllocation(i, other.family_name()))
            }
        }
    }
    if k < 2 {
        return Err(DynamicsError::SingleObject);
    }
    let rho = 1.0 - delta / (4.0 * (k as f64).ln());

    let agents = market
        .agents
        .iter()
        .map(|agent| {
            let objects = match &agent.utility {
                UtilitySpec::ResourceAllocation { objects } => objects.clone(),
                _ => unreachable!(),
            };
            Agent {
                budget: agent.budget,
                utility: UtilitySpec::NestedCesLeontief { rho, objects },
            }
        })
        .collect();
    let distorted = Market {
        goods: market.goods.clone(),
        agents,
        normalized: false,
    };
    Ok(crate::market::normalize(&distorted)?)
}

// ---------------------------------------------------------------------------
// Trace averaging
// ---------------------------------------------------------------------------

/// Arithmetic means of prices and aggregate demand over the recorded rounds
/// with t >= from_round.
pub fn average_trace(
    trace: &Trace,
    from_round: usize,
) -> Result<(Vec<f64>, Vec<f64>), DynamicsError> {
    let window: Vec<&Round> = trace.rounds.iter().filter(|r| r.t >= from_round).collect();
    if window.is_empty() {
        return Err(DynamicsError::EmptyWindow);
    }
    let m = window[0].p.len();
    let mut avg_p = vec![0.0; m];
    let mut avg_f = vec![0.0; m];
    for r in &window {
        for j in 0..m {
            avg_p[j] += r.p[j];
            avg_f[j] += r.z[j] + 1.0;
        }
    }
    let n = window.len() as f64;
    for j in 0..m {
        avg_p[j] /= n;
        avg_f[j] /= n;
    }
    Ok((avg_p, avg_f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::load_market;

    fn cd_market() -> Market {
        load_market(
            r#"{"version":1,"goods":["g1","g2"],
                "agents":[{"budget":1.0,"utility":{"family":"cobb_douglas","c":{"g1":0.3,"g2":0.7}}}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn step_direct_application() {
        let p = Prices(vec![0.5, 0.5]);
        let z = ExcessDemand { z: vec![0.2, -0.2] };
        let next = step(&p, &z, 0.1);
        assert!((next[0] - 0.51).abs() < 1e-15);
        assert!((next[1] - 0.49).abs() < 1e-15);
    }

    #[test]
    fn step_fixed_point_iff_zero_excess() {
        let p = Prices(vec![0.4, 0.6]);
        let zero = ExcessDemand { z: vec![0.0, 0.0] };
        assert_eq!(step(&p, &zero, 0.3), p);
        let nonzero = ExcessDemand { z: vec![1e-9, -1e-9] };
        assert_ne!(step(&p, &nonzero, 0.3), p);
    }

    #[test]
    fn uniform_init() {
        let market = load_market(
            r#"{"version":1,"goods":["a","b","c","d"],
                "agents":[{"budget":1.0,"utility":{"family":"cobb_douglas",
                  "c":{"a":1.0,"b":1.0,"c":1.0,"d":1.0}}}]}"#,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, warned) = init_prices(&market, &InitMode::Uniform, &mut rng).unwrap();
        assert!(!warned);
        assert!(p.0.iter().all(|&pj| (pj - 0.25).abs() < 1e-15));
    }

    #[test]
    fn spend_reset_lands_in_b() {
        let market = cd_market();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (p, _) = init_prices(&market, &InitMode::SpendReset, &mut rng).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn explicit_init_renormalizes_with_warning() {
        let market = cd_market();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, warned) =
            init_prices(&market, &InitMode::Explicit(vec![0.2, 0.9]), &mut rng).unwrap();
        assert!(warned);
        assert!((p[0] - 2.0 / 11.0).abs() < 1e-15);
        assert!((p[1] - 9.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn explicit_init_rejects_zero_entry() {
        let market = cd_market();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            init_prices(&market, &InitMode::Explicit(vec![0.0, 1.0]), &mut rng),
            Err(DynamicsError::BadInitialPrice(0))
        ));
    }

    #[test]
    fn cobb_douglas_one_step_with_unit_epsilon() {
        let market = cd_market();
        let config = RunConfig {
            epsilon: Some(1.0),
            delta: 1e-9,
            ..RunConfig::default()
        };
        let (trace, result) = run(&market, &config).unwrap();
        assert!(result.converged);
        assert_eq!(result.rounds, 1);
        let p1 = &trace.rounds[1].p;
        assert!((p1[0] - 0.3).abs() < 1e-12);
        assert!((p1[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn leontief_started_at_equilibrium_terminates_immediately() {
        let market = load_market(
            r#"{"version":1,"goods":["g1","g2"],
                "agents":[{"budget":0.5,"utility":{"family":"leontief","a":{"g1":0.8,"g2":0.2}}},
                          {"budget":0.5,"utility":{"family":"leontief","a":{"g1":0.2,"g2":0.8}}}]}"#,
        )
        .unwrap();
        let config = RunConfig {
            epsilon: Some(0.1),
            delta: 1e-8,
            init: InitMode::Explicit(vec![0.5, 0.5]),
            ..RunConfig::default()
        };
        let (trace, result) = run(&market, &config).unwrap();
        assert!(result.converged);
        assert_eq!(result.rounds, 0);
        assert!(trace.rounds[0].z.iter().all(|&zj| zj.abs() < 1e-12));
    }

    #[test]
    fn run_rejects_undistorted_resource_allocation() {
        let market = load_market(
            r#"{"version":1,"goods":["g1","g2"],
                "agents":[{"budget":1.0,"utility":{"family":"resource_allocation",
                  "objects":[{"c":1.0,"a":{"g1":1.0}},{"c":1.0,"a":{"g2":1.0}}]}}]}"#,
        )
        .unwrap();
        let err = run(&market, &RunConfig::default()).unwrap_err();
        assert!(matches!(err, DynamicsError::Demand(DemandError::DistortFirst)));
    }

    #[test]
    fn distort_formula() {
        let market = load_market(
            r#"{"version":1,"goods":["g1","g2"],
                "agents":[{"budget":1.0,"utility":{"family":"resource_allocation",
                  "objects":[{"c":1.0,"a":{"g1":1.0}},{"c":1.0,"a":{"g2":1.0}}]}}]}"#,
        )
        .unwrap();
        let distorted = distort(&market, 0.1).unwrap();
        match &distorted.agents[0].utility {
            UtilitySpec::NestedCesLeontief { rho, .. } => {
                let expected = 1.0 - 0.1 / (4.0 * 2f64.ln());
                assert!((rho - expected).abs() < 1e-15);
                assert!((expected - 0.9639).abs() < 1e-3);
            }
            other => panic!("unexpected family {other:?}"),
        }
    }

    #[test]
    fn distort_rejects_single_object() {
        let market = load_market(
            r#"{"version":1,"goods":["g1"],
                "agents":[{"budget":1.0,"utility":{"family":"resource_allocation",
                  "objects":[{"c":1.0,"a":{"g1":1.0}}]}}]}"#,
        )
        .unwrap();
        assert!(matches!(distort(&market, 0.1), Err(DynamicsError::SingleObject)));
    }

    #[test]
    fn average_of_two_round_trace() {
        let trace = Trace {
            rounds: vec![
                Round { t: 0, p: vec![0.4, 0.6], z: vec![0.0, 0.0], phi: 0.0, spend: vec![] },
                Round { t: 1, p: vec![0.6, 0.4], z: vec![0.0, 0.0], phi: 0.0, spend: vec![] },
            ],
            epsilon: 0.1,
            market_hash: String::new(),
        };
        let (avg_p, avg_f) = average_trace(&trace, 0).unwrap();
        assert!((avg_p[0] - 0.5).abs() < 1e-15);
        assert!((avg_p[1] - 0.5).abs() < 1e-15);
        assert!((avg_f[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn average_empty_window_errors() {
        let trace = Trace { rounds: vec![], epsilon: 0.1, market_hash: String::new() };
        assert!(matches!(average_trace(&trace, 0), Err(DynamicsError::EmptyWindow)));
    }
}
