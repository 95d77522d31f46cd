//! Eisenberg-Gale primal/dual objectives, analytic derivatives, a reference
//! equilibrium solver, and empirical constant estimation.
//!
//! The dual objective is evaluated two ways: a generic maximizer route
//! phi(p) = psi(x(p)) + sum_j p_j (1 - sum_i x_ij) valid for every family,
//! and the explicit closed form for object-structured CES families. Tests
//! hold the two routes together.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::demand::{
    ces_as_objects, demands, excess_demand, excess_from_bundles, leontief_as_object,
    object_prices, spend_shares, utility, Bundle, DemandError, Prices,
};
use crate::market::{Market, ObjectSpec, UtilitySpec};

#[derive(Debug, Error)]
pub enum DualityError {
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error("agent {0} has zero utility: primal value is -infinity")]
    ZeroUtility(usize),
    #[error("analytic Hessian unsupported for family {0}")]
    UnsupportedFamily(&'static str),
    #[error("allocation has {got} agents, market has {want}")]
    AgentCountMismatch { got: usize, want: usize },
}

// ---------------------------------------------------------------------------
// Object view
// ---------------------------------------------------------------------------

/// A utility reduced to CES-over-Leontief-objects form: `rho` is `None` for
/// the pure Leontief single-object case (exact, not a rho -> -inf limit).
pub struct ObjectView {
    pub rho: Option<f64>,
    pub objects: Vec<ObjectSpec>,
}

/// Object-structured view of an agent's utility, if one exists.
/// Cobb-Douglas and undistorted resource allocation have none.
pub fn object_view(utility: &UtilitySpec) -> Option<ObjectView> {
    match utility {
        UtilitySpec::Ces { rho, c } => {
            Some(ObjectView { rho: Some(*rho), objects: ces_as_objects(c) })
        }
        UtilitySpec::Leontief { a } => {
            Some(ObjectView { rho: None, objects: vec![leontief_as_object(a)] })
        }
        UtilitySpec::NestedCesLeontief { rho, objects } => {
            Some(ObjectView { rho: Some(*rho), objects: objects.clone() })
        }
        UtilitySpec::CobbDouglas { .. } | UtilitySpec::ResourceAllocation { .. } => None,
    }
}

/// A = max_j sum_{i,J} a_ij^J, exact. Agents without an object view
/// contribute their Cobb-Douglas singleton weights of 1 per supported good.
pub fn coefficient_column_max(market: &Market) -> f64 {
    let m = market.good_count();
    let mut col = vec![0.0f64; m];
    for agent in &market.agents {
        match object_view(&agent.utility) {
            Some(view) => {
                for obj in &view.objects {
                    for &(j, a) in &obj.a {
                        col[j] += a;
                    }
                }
            }
            None => {
                for j in agent.utility.support(m) {
                    col[j] += 1.0;
                }
            }
        }
    }
    col.into_iter().fold(0.0, f64::max)
}

/// The tilde transform: one entry sum_j a_ij^J v_j per (agent, object).
pub fn tilde(market: &Market, v: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for agent in &market.agents {
        if let Some(view) = object_view(&agent.utility) {
            for obj in &view.objects {
                out.push(obj.a.iter().map(|&(j, a)| a * v[j]).sum());
            }
        }
    }
    out
}

/// Smallest positive a_ij^J across the market's object views.
pub fn min_positive_coefficient(market: &Market) -> f64 {
    let mut a_min = f64::INFINITY;
    for agent in &market.agents {
        if let Some(view) = object_view(&agent.utility) {
            for obj in &view.objects {
                for &(_, a) in &obj.a {
                    a_min = a_min.min(a);
                }
            }
        }
    }
    a_min
}

// ---------------------------------------------------------------------------
// Primal and dual objectives
// ---------------------------------------------------------------------------

/// Primal objective psi(x) = sum_i b_i ln u_i(x_i).
pub fn psi(market: &Market, bundles: &[Bundle]) -> Result<f64, DualityError> {
    if bundles.len() != market.agent_count() {
        return Err(DualityError::AgentCountMismatch {
            got: bundles.len(),
            want: market.agent_count(),
        });
    }
    let mut total = 0.0;
    for (i, (agent, bundle)) in market.agents.iter().zip(bundles).enumerate() {
        let u = utility(agent, bundle);
        if u.is_nan() || u <= 0.0 {
            return Err(DualityError::ZeroUtility(i));
        }
        total += agent.budget * u.ln();
    }
    Ok(total)
}

/// Dual objective via the maximizer route: the inner conjugate maximum is
/// attained at x(p), so phi(p) = psi(x(p)) + sum_j p_j (1 - sum_i x_ij(p)).
pub fn phi(market: &Market, p: &Prices) -> Result<f64, DualityError> {
    let bundles = demands(market, p)?;
    let ed = excess_from_bundles(&bundles, p.len());
    let linear: f64 = p.0.iter().zip(&ed.z).map(|(pj, zj)| -pj * zj).sum();
    Ok(psi(market, &bundles)? + linear)
}

/// Closed-form dual for object-structured CES families:
/// phi(p) = sum_j p_j - sum_i b_i
///        + sum_i b_i ln (sum_J (b_i c_i^J / ptilde_i^J)^(rho/(1-rho)))^((1-rho)/rho).
/// Errors on families without the form (Cobb-Douglas, pure Leontief,
/// undistorted resource allocation).
pub fn phi_closed_form(market: &Market, p: &Prices) -> Result<f64, DualityError> {
    p.check_positive()?;
    let mut total = p.sum() - market.agents.iter().map(|a| a.budget).sum::<f64>();
    for agent in &market.agents {
        let view = object_view(&agent.utility)
            .ok_or(DualityError::UnsupportedFamily(agent.utility.family_name()))?;
        let rho = view
            .rho
            .ok_or(DualityError::UnsupportedFamily(agent.utility.family_name()))?;
        let exponent = rho / (1.0 - rho);
        let ptilde = object_prices(&view.objects, p);
        let logs: Vec<f64> = view
            .objects
            .iter()
            .zip(&ptilde)
            .map(|(o, &pt)| exponent * (agent.budget.ln() + o.c.ln() - pt.ln()))
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += agent.budget * lse / exponent;
    }
    Ok(total)
}

/// grad phi(p) = -z(p), exact by the gradient lemma; delegates to the
/// excess demand oracle.
pub fn grad_phi(market: &Market, p: &Prices) -> Result<Vec<f64>, DualityError> {
    let ed = excess_demand(market, p)?;
    Ok(ed.z.iter().map(|z| -z).collect())
}

/// Analytic Hessian of phi for object-structured CES families, with
/// s_i^J the spend shares and e = rho/(1-rho):
/// H_jl = 1/(1-rho) sum_i b_i [ sum_J a_j a_l s_J / ptilde_J^2
///        - rho (sum_J a_j s_J/ptilde_J)(sum_J a_l s_J/ptilde_J) ].
pub fn hessian_phi(market: &Market, p: &Prices) -> Result<DMatrix<f64>, DualityError> {
    p.check_positive()?;
    let m = p.len();
    let mut h = DMatrix::<f64>::zeros(m, m);
    for agent in &market.agents {
        let view = object_view(&agent.utility)
            .ok_or(DualityError::UnsupportedFamily(agent.utility.family_name()))?;
        let rho = view
            .rho
            .ok_or(DualityError::UnsupportedFamily(agent.utility.family_name()))?;
        let ptilde = object_prices(&view.objects, p);
        let shares = spend_shares(&view.objects, &ptilde, rho);
        // v_j = sum_J a_j s_J / ptilde_J
        let mut v = vec![0.0; m];
        for ((obj, &s), &pt) in view.objects.iter().zip(&shares).zip(&ptilde) {
            for &(j, a) in &obj.a {
                v[j] += a * s / pt;
            }
        }
        let scale = agent.budget / (1.0 - rho);
        for ((obj, &s), &pt) in view.objects.iter().zip(&shares).zip(&ptilde) {
            let w = s / (pt * pt);
            for &(j, aj) in &obj.a {
                for &(l, al) in &obj.a {
                    h[(j, l)] += scale * aj * al * w;
                }
            }
        }
        for j in 0..m {
            if v[j] == 0.0 {
                continue;
            }
            for l in 0..m {
                h[(j, l)] -= scale * rho * v[j] * v[l];
            }
        }
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// Reference equilibrium solver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumReport {
    pub p_star: Prices,
    pub x_star: Vec<Bundle>,
    pub dual_value: f64,
    /// ||z(p*)||_inf at the returned prices.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn simplex_renormalize(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    for pj in p.iter_mut() {
        *pj /= s;
    }
}

/// Equilibrium-style termination: no good over-demanded beyond tol, and
/// under-demanded goods (condition iv) are allowed only at price <= tol.
fn equilibrium_reached(p: &Prices, z: &[f64], tol: f64) -> bool {
    z.iter()
        .zip(&p.0)
        .all(|(&zj, &pj)| zj <= tol && (zj >= -tol || pj <= tol))
}

/// Reference equilibrium, independent of the fixed-epsilon dynamics under
/// test: multiplicative mirror descent on the simplex with step-size halving
/// on non-decrease, from the uniform start. Pure Cobb-Douglas markets use
/// the closed form p_j = sum_i b_i c_ij as a shortcut.
pub fn solve_equilibrium(market: &Market, tol: f64) -> Result<EquilibriumReport, DualityError> {
    solve_equilibrium_capped(market, tol, 400_000)
}

pub fn solve_equilibrium_capped(
    market: &Market,
    tol: f64,
    max_iters: usize,
) -> Result<EquilibriumReport, DualityError> {
    let m = market.good_count();

    if let Some(p) = cobb_douglas_equilibrium(market) {
        let z = excess_demand(market, &p)?;
        return Ok(EquilibriumReport {
            x_star: demands(market, &p)?,
            dual_value: phi(market, &p)?,
            residual: z.linf(),
            iterations: 0,
            converged: equilibrium_reached(&p, &z.z, tol),
            p_star: p,
        });
    }

    let mut p = Prices::uniform(m);
    let mut z = excess_demand(market, &p)?.z;
    let mut cur_phi = phi(market, &p)?;
    let eta0 = 0.5;
    let mut eta = eta0;
    let mut iterations = 0;
    let mut converged = equilibrium_reached(&p, &z, tol);

    while !converged && iterations < max_iters {
        // minimize phi: grad = -z, so the exponentiated-gradient step is
        // p_j <- p_j exp(eta z_j), renormalized to B
        let mut accepted = false;
        for _ in 0..70 {
            let mut cand: Vec<f64> =
                p.0.iter().zip(&z).map(|(&pj, &zj)| pj * (eta * zj).exp()).collect();
            simplex_renormalize(&mut cand);
            let cand = Prices(cand);
            let cand_phi = phi(market, &cand)?;
            if cand_phi < cur_phi {
                p = cand;
                cur_phi = cand_phi;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break; // step size underflow: best iterate reached
        }
        eta = (eta * 1.5).min(eta0);
        z = excess_demand(market, &p)?.z;
        iterations += 1;
        converged = equilibrium_reached(&p, &z, tol);
    }

    let residual = z.iter().map(|zj| zj.abs()).fold(0.0, f64::max);
    Ok(EquilibriumReport {
        x_star: demands(market, &p)?,
        dual_value: phi(market, &p)?,
        residual,
        iterations,
        converged,
        p_star: p,
    })
}

/// Closed-form equilibrium for all-Cobb-Douglas markets: p_j = sum_i b_i c_ij.
pub fn cobb_douglas_equilibrium(market: &Market) -> Option<Prices> {
    let mut p = vec![0.0; market.good_count()];
    for agent in &market.agents {
        match &agent.utility {
            UtilitySpec::CobbDouglas { c } => {
                for (pj, &cj) in p.iter_mut().zip(c) {
                    *pj += agent.budget * cj;
                }
            }
            _ => return None,
        }
    }
    Some(Prices(p))
}

// ---------------------------------------------------------------------------
// Empirical constants
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BoundsEstimate {
    /// A = max_j sum_{i,J} a_ij^J, exact.
    pub a_max: f64,
    /// W = max{1, max sampled max_j z_j(p)}.
    pub w: f64,
    /// min over samples of the Hessian quadratic-form ratio against ||xtilde||^2.
    pub l_est_min: Option<f64>,
    /// max over samples of the same ratio.
    pub l_est_max: Option<f64>,
    /// max over samples of ||H x||_2 / ||xtilde||_2.
    pub lambda_est_max: Option<f64>,
    pub samples: usize,
}

/// Stacked tilde-map Gram matrix G with x^T G x = ||xtilde||_2^2.
fn tilde_gram(market: &Market) -> DMatrix<f64> {
    let m = market.good_count();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for agent in &market.agents {
        if let Some(view) = object_view(&agent.utility) {
            for obj in &view.objects {
                let mut row = vec![0.0; m];
                for &(j, a) in &obj.a {
                    row[j] = a;
                }
                rows.push(row);
            }
        }
    }
    let a = DMatrix::from_fn(rows.len(), m, |r, c| rows[r][c]);
    a.transpose() * a
}

/// Extremal generalized eigenvalues of (s, gram) restricted to the range of
/// gram. Returns (min, max) of x^T s x / x^T gram x.
fn pencil_extremes(s: &DMatrix<f64>, gram: &DMatrix<f64>) -> Option<(f64, f64)> {
    let eig = gram.clone().symmetric_eigen();
    let keep: Vec<usize> = (0..gram.nrows())
        .filter(|&k| eig.eigenvalues[k] > 1e-12)
        .collect();
    if keep.is_empty() {
        return None;
    }
    let basis = DMatrix::from_fn(gram.nrows(), keep.len(), |r, c| {
        eig.eigenvectors[(r, keep[c])] / eig.eigenvalues[keep[c]].sqrt()
    });
    let reduced = basis.transpose() * s * &basis;
    let vals = reduced.symmetric_eigen().eigenvalues;
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some((lo, hi))
}

/// Dirichlet-uniform sample on the simplex, floored away from the boundary.
pub fn sample_simplex_price(m: usize, floor: f64, rng: &mut impl Rng) -> Prices {
    // exponential spacings give the flat Dirichlet
    let mut p: Vec<f64> = (0..m)
        .map(|_| -(1.0 - rng.gen::<f64>()).ln())
        .map(|e| e.max(1e-300))
        .collect();
    simplex_renormalize(&mut p);
    for pj in &mut p {
        *pj = pj.max(floor);
    }
    simplex_renormalize(&mut p);
    Prices(p)
}

/// Sample-based estimates of the constants the convergence statements
/// depend on. Hessian-derived entries are `None` when any agent lacks the
/// analytic Hessian (Cobb-Douglas, pure Leontief).
pub fn estimate_bounds(
    market: &Market,
    samples: usize,
    seed: u64,
) -> Result<BoundsEstimate, DualityError> {
    let m = market.good_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = 0.01 / m as f64;

    let hessian_supported = market.agents.iter().all(|a| {
        matches!(object_view(&a.utility), Some(ObjectView { rho: Some(_), .. }))
    });
    let gram = if hessian_supported { Some(tilde_gram(market)) } else { None };

    let mut w: f64 = 1.0;
    let mut l_min = f64::INFINITY;
    let mut l_max = f64::NEG_INFINITY;
    let mut lambda_max = f64::NEG_INFINITY;

    let mut absorb = |p: &Prices| -> Result<(), DualityError> {
        let z = excess_demand(market, p)?;
        w = w.max(z.max());
        if let Some(gram) = &gram {
            let h = hessian_phi(market, p)?;
            if let Some((lo, hi)) = pencil_extremes(&h, gram) {
                l_min = l_min.min(lo);
                l_max = l_max.max(hi);
            }
            let h2 = &h * &h;
            if let Some((_, hi)) = pencil_extremes(&h2, gram) {
                lambda_max = lambda_max.max(hi.max(0.0).sqrt());
            }
        }
        Ok(())
    };

    // the dynamics start at the uniform point and never increase phi, so
    // only the phi-sublevel set of the uniform start is reachable; sampling
    // the whole simplex would price in boundary regions the trajectory
    // cannot visit and make the step size uselessly small
    let uniform = Prices::uniform(m);
    let phi_start = phi(market, &uniform)?;
    absorb(&uniform)?;
    let blend = |t: f64, p: &Prices| {
        Prices(
            uniform
                .0
                .iter()
                .zip(&p.0)
                .map(|(&u, &pj)| u + t * (pj - u))
                .collect(),
        )
    };
    for _ in 1..samples.max(1) {
        let p = sample_simplex_price(m, floor, &mut rng);
        if phi(market, &p)? <= phi_start {
            absorb(&p)?;
            continue;
        }
        // phi is convex along the segment from the uniform start, so bisect
        // to the sublevel-set boundary, where the curvature extremes live
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..20 {
            let mid = 0.5 * (lo + hi);
            if phi(market, &blend(mid, &p))? <= phi_start {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        absorb(&blend(lo, &p))?;
    }
    let kept = samples.max(1);

    Ok(BoundsEstimate {
        a_max: coefficient_column_max(market),
        w,
        l_est_min: gram.as_ref().map(|_| l_min),
        l_est_max: gram.as_ref().map(|_| l_max),
        lambda_est_max: gram.as_ref().map(|_| lambda_max),
        samples: kept,
    })
}

/// Hessian applied to a vector, for resampling checks.
pub fn hessian_apply(h: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (h * DVector::from_column_slice(x)).iter().cloned().collect()
}
