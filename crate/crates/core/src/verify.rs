//! Approximate-equilibrium checkers (both definitions), per-round trace
//! invariants, the multiplicative-weights prefix certificate, and
//! convergence-rate fitting.

use serde::Serialize;
use thiserror::Error;

use crate::demand::{demands, excess_from_bundles, utility, Bundle, DemandError, Prices};
use crate::dynamics::Trace;
use crate::market::Market;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error("allocation has {got} agents, market has {want}")]
    AgentCountMismatch { got: usize, want: usize },
    #[error("allocation for agent {agent} has {got} goods, market has {want}")]
    GoodCountMismatch { agent: usize, got: usize, want: usize },
    #[error("agent {0} has zero optimal utility at these prices")]
    ZeroOptimalUtility(usize),
    #[error("dual gap below floor for the entire window")]
    GapBelowFloor,
    #[error("trace too short to fit a rate")]
    TraceTooShort,
}

/// Numerical slack for the exact-optimality property P1 of Definition 1.
pub const P1_RECOMPUTE_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Definition 1 / Definition 2 checkers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ApproxEquilibriumReport {
    pub definition: u8,
    pub delta: f64,
    pub p1_pass: bool,
    pub p2_pass: bool,
    pub p3_pass: bool,
    /// Violating agent indices for P1.
    pub p1_witnesses: Vec<usize>,
    /// Violating good indices for P2.
    pub p2_witnesses: Vec<usize>,
    /// Violating good indices for P3.
    pub p3_witnesses: Vec<usize>,
    pub overall: bool,
}

fn check_shapes(market: &Market, x: &[Bundle]) -> Result<(), VerifyError> {
    if x.len() != market.agent_count() {
        return Err(VerifyError::AgentCountMismatch { got: x.len(), want: market.agent_count() });
    }
    for (i, b) in x.iter().enumerate() {
        if b.x.len() != market.good_count() {
            return Err(VerifyError::GoodCountMismatch {
                agent: i,
                got: b.x.len(),
                want: market.good_count(),
            });
        }
    }
    Ok(())
}

/// Definition 1: exact demands, bounded excess, cheap leftovers.
/// P1: ||x_i - x_i(p)||_inf <= 1e-10 per agent (recomputed);
/// P2: z_j(p) <= delta; P3: z_j(p) < -delta implies p_j <= delta.
pub fn check_def1(
    market: &Market,
    p: &Prices,
    x: &[Bundle],
    delta: f64,
) -> Result<ApproxEquilibriumReport, VerifyError> {
    check_shapes(market, x)?;
    let optimal = demands(market, p)?;
    let mut p1_witnesses = Vec::new();
    for (i, (given, opt)) in x.iter().zip(&optimal).enumerate() {
        let dev = given
            .x
            .iter()
            .zip(&opt.x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if dev > P1_RECOMPUTE_TOL {
            p1_witnesses.push(i);
        }
    }
    let z = excess_from_bundles(&optimal, market.good_count()).z;
    let mut p2_witnesses = Vec::new();
    let mut p3_witnesses = Vec::new();
    for (j, &zj) in z.iter().enumerate() {
        if zj > delta {
            p2_witnesses.push(j);
        }
        if zj < -delta && p[j] > delta {
            p3_witnesses.push(j);
        }
    }
    Ok(build_report(1, delta, p1_witnesses, p2_witnesses, p3_witnesses))
}

/// Definition 2: near-optimal utilities, feasible supply, cheap leftovers.
/// P1: u_i(x_i) >= (1 - delta) u_i(x_i(p)); P2: excess from x is <= 0;
/// P3 as Definition 1 but on the excess from x.
pub fn check_def2(
    market: &Market,
    p: &Prices,
    x: &[Bundle],
    delta: f64,
) -> Result<ApproxEquilibriumReport, VerifyError> {
    check_shapes(market, x)?;
    let optimal = demands(market, p)?;
    let mut p1_witnesses = Vec::new();
    for (i, ((agent, given), opt)) in
        market.agents.iter().zip(x).zip(&optimal).enumerate()
    {
        let u_opt = utility(agent, opt);
        if u_opt.is_nan() || u_opt <= 0.0 {
            return Err(VerifyError::ZeroOptimalUtility(i));
        }
        if utility(agent, given) < (1.0 - delta) * u_opt {
            p1_witnesses.push(i);
        }
    }
    let z = excess_from_bundles(x, market.good_count()).z;
    let mut p2_witnesses = Vec::new();
    let mut p3_witnesses = Vec::new();
    for (j, &zj) in z.iter().enumerate() {
        if zj > 0.0 {
            p2_witnesses.push(j);
        }
        if zj < -delta && p[j] > delta {
            p3_witnesses.push(j);
        }
    }
    Ok(build_report(2, delta, p1_witnesses, p2_witnesses, p3_witnesses))
}

fn build_report(
    definition: u8,
    delta: f64,
    p1_witnesses: Vec<usize>,
    p2_witnesses: Vec<usize>,
    p3_witnesses: Vec<usize>,
) -> ApproxEquilibriumReport {
    let p1_pass = p1_witnesses.is_empty();
    let p2_pass = p2_witnesses.is_empty();
    let p3_pass = p3_witnesses.is_empty();
    ApproxEquilibriumReport {
        definition,
        delta,
        p1_pass,
        p2_pass,
        p3_pass,
        p1_witnesses,
        p2_witnesses,
        p3_witnesses,
        overall: p1_pass && p2_pass && p3_pass,
    }
}

// ---------------------------------------------------------------------------
// Trace invariants
// ---------------------------------------------------------------------------

pub const SIMPLEX_TOL: f64 = 1e-10;
pub const BUDGET_BALANCE_TOL: f64 = 1e-10;
pub const MONOTONICITY_TOL: f64 = 1e-12;
pub const STEP_CONSISTENCY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Default, Serialize)]
pub struct InvariantReport {
    /// First round where |sum_j p_j - 1| > 1e-10.
    pub simplex_violation: Option<usize>,
    /// First round with a non-positive price.
    pub positivity_violation: Option<usize>,
    /// First round where |sum_j p_j z_j| > 1e-10.
    pub budget_balance_violation: Option<usize>,
    /// First round where phi increased beyond 1e-12.
    pub monotonicity_violation: Option<usize>,
    pub monotonicity_violations: usize,
    /// First round where the stored p^{t+1} is not step(p^t, z^t, eps).
    pub step_consistency_violation: Option<usize>,
}

impl InvariantReport {
    pub fn all_pass(&self) -> bool {
        self.simplex_violation.is_none()
            && self.positivity_violation.is_none()
            && self.budget_balance_violation.is_none()
            && self.monotonicity_violation.is_none()
            && self.step_consistency_violation.is_none()
    }
}

/// Per-round checks over a complete trace: simplex membership, positivity,
/// budget balance, phi monotonicity, and stored-vs-recomputed step
/// consistency. Report-returning; first violation per class.
pub fn assert_invariants(trace: &Trace, _market: &Market) -> InvariantReport {
    let mut report = InvariantReport::default();
    let eps = trace.epsilon;

    for (idx, r) in trace.rounds.iter().enumerate() {
        let sum: f64 = r.p.iter().sum();
        if report.simplex_violation.is_none() && (sum - 1.0).abs() > SIMPLEX_TOL {
            report.simplex_violation = Some(r.t);
        }
        if report.positivity_violation.is_none() && r.p.iter().any(|&pj| pj.is_nan() || pj <= 0.0) {
            report.positivity_violation = Some(r.t);
        }
        let balance: f64 = r.p.iter().zip(&r.z).map(|(pj, zj)| pj * zj).sum();
        if report.budget_balance_violation.is_none() && balance.abs() > BUDGET_BALANCE_TOL {
            report.budget_balance_violation = Some(r.t);
        }
        if idx + 1 < trace.rounds.len() {
            let next = &trace.rounds[idx + 1];
            if next.phi > r.phi + MONOTONICITY_TOL {
                report.monotonicity_violations += 1;
                if report.monotonicity_violation.is_none() {
                    report.monotonicity_violation = Some(next.t);
                }
            }
            if next.t == r.t + 1 && report.step_consistency_violation.is_none() {
                let consistent = next.p.iter().zip(r.p.iter().zip(&r.z)).all(
                    |(&pn, (&pj, &zj))| {
                        let expect = pj * (1.0 + eps * zj);
                        (pn - expect).abs() <= STEP_CONSISTENCY_TOL * expect.abs().max(1.0)
                    },
                );
                if !consistent {
                    report.step_consistency_violation = Some(next.t);
                }
            }
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Multiplicative-weights certificate
// ---------------------------------------------------------------------------

pub const MWU_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct GoodPrefixCheck {
    pub good: usize,
    pub average_excess: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrefixCheck {
    /// Prefix length T.
    pub t: usize,
    /// v = max_j (1/T) sum_{t<T} z_j(p^t)^2.
    pub v: f64,
    pub goods: Vec<GoodPrefixCheck>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MwuCertificate {
    pub epsilon: f64,
    /// w = max_{j,t} |z_j(p^t)|.
    pub w: f64,
    /// The lemma applies only when eps <= 1/(2w).
    pub applicable: bool,
    pub prefixes: Vec<PrefixCheck>,
    pub holds: bool,
}

/// Verify the per-good prefix-average inequality
/// (1/T) sum_{t<T} z_j(p^t) <= eps v + ln(1/p0_j)/(eps T) + 1e-9
/// at prefix lengths that are powers of two (plus the full trace).
pub fn mwu_certificate(trace: &Trace) -> MwuCertificate {
    let eps = trace.epsilon;
    let total = trace.rounds.len();
    let m = trace.rounds.first().map(|r| r.z.len()).unwrap_or(0);

    let w = trace
        .rounds
        .iter()
        .flat_map(|r| r.z.iter().map(|z| z.abs()))
        .fold(0.0, f64::max);
    let applicable = total > 0 && eps <= 1.0 / (2.0 * w.max(f64::MIN_POSITIVE));

    let mut prefix_lengths = Vec::new();
    let mut len = 1usize;
    while len < total {
        prefix_lengths.push(len);
        len *= 2;
    }
    if total > 0 {
        prefix_lengths.push(total);
    }

    let p0 = trace.rounds.first().map(|r| r.p.clone()).unwrap_or_default();
    let mut sums = vec![0.0f64; m];
    let mut squares = vec![0.0f64; m];
    let mut prefixes = Vec::with_capacity(prefix_lengths.len());
    let mut cursor = 0usize;
    let mut holds = true;

    for &t_len in &prefix_lengths {
        while cursor < t_len {
            for (j, &zj) in trace.rounds[cursor].z.iter().enumerate() {
                sums[j] += zj;
                squares[j] += zj * zj;
            }
            cursor += 1;
        }
        let tf = t_len as f64;
        let v = squares.iter().map(|s| s / tf).fold(0.0, f64::max);
        let mut goods = Vec::with_capacity(m);
        let mut pass = true;
        for j in 0..m {
            let average_excess = sums[j] / tf;
            let bound = eps * v + (1.0 / p0[j]).ln() / (eps * tf);
            if average_excess > bound + MWU_SLACK {
                pass = false;
            }
            goods.push(GoodPrefixCheck { good: j, average_excess, bound });
        }
        holds &= pass;
        prefixes.push(PrefixCheck { t: t_len, v, goods, pass });
    }

    MwuCertificate { epsilon: eps, w, applicable, prefixes, holds }
}

// ---------------------------------------------------------------------------
// Convergence-rate fitting
// ---------------------------------------------------------------------------

/// Gaps at or below this floor are excluded from the fit.
pub const GAP_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, Serialize)]
pub struct RateFit {
    /// (first, last) round used in the fit.
    pub window: (usize, usize),
    pub points: usize,
    /// Fitted per-round contraction ratio r = e^slope of phi(p^t) - phi(p*).
    pub rate: f64,
    /// RMS residual of the log-linear fit.
    pub residual: f64,
    /// Range of ln(gap) over the window; residual/log_range is the
    /// fit-quality figure.
    pub log_range: f64,
    pub contracting: bool,
}

/// Least-squares fit of ln(phi(p^t) - phi(p*)) against t over the rounds
/// with gap above the floor.
pub fn fit_rate(trace: &Trace, p_star_value: f64) -> Result<RateFit, VerifyError> {
    let points: Vec<(f64, f64)> = trace
        .rounds
        .iter()
        .filter_map(|r| {
            let gap = r.phi - p_star_value;
            (gap > GAP_FLOOR).then(|| (r.t as f64, gap.ln()))
        })
        .collect();
    if trace.rounds.is_empty() {
        return Err(VerifyError::TraceTooShort);
    }
    if points.is_empty() {
        return Err(VerifyError::GapBelowFloor);
    }
    if points.len() < 2 {
        return Err(VerifyError::TraceTooShort);
    }

    let n = points.len() as f64;
    let mean_t = points.iter().map(|&(t, _)| t).sum::<f64>() / n;
    let mean_y = points.iter().map(|&(_, y)| y).sum::<f64>() / n;
    let var_t: f64 = points.iter().map(|&(t, _)| (t - mean_t).powi(2)).sum();
    let cov: f64 = points.iter().map(|&(t, y)| (t - mean_t) * (y - mean_y)).sum();
    let slope = if var_t > 0.0 { cov / var_t } else { 0.0 };
    let intercept = mean_y - slope * mean_t;

    let sse: f64 = points
        .iter()
        .map(|&(t, y)| (y - slope * t - intercept).powi(2))
        .sum();
    let residual = (sse / n).sqrt();
    let y_min = points.iter().map(|&(_, y)| y).fold(f64::INFINITY, f64::min);
    let y_max = points.iter().map(|&(_, y)| y).fold(f64::NEG_INFINITY, f64::max);
    let rate = slope.exp();

    Ok(RateFit {
        window: (points[0].0 as usize, points[points.len() - 1].0 as usize),
        points: points.len(),
        rate,
        residual,
        log_range: y_max - y_min,
        contracting: rate < 1.0,
    })
}
