//! Closed-form demand oracles: each agent's optimal bundle x_i(p) and the
//! market excess demand z(p).
//!
//! All powers t^(rho/(1-rho)) are computed as exp((rho/(1-rho)) * ln t) with
//! max-subtraction across objects; the exponent blows up as rho -> 0 or
//! rho -> -inf and the spend shares are softmax-like ratios.

use serde::Serialize;
use thiserror::Error;

use crate::market::{Agent, Market, ObjectSpec, UtilitySpec};

#[derive(Debug, Error)]
pub enum DemandError {
    #[error("non-positive price at good index {0}")]
    NonPositivePrice(usize),
    #[error("resource_allocation utilities have no demand oracle; distort first")]
    DistortFirst,
}

/// Strictly positive prices over the goods. The dynamics keep the sum at 1
/// (the budget simplex B) but arbitrary positive vectors are accepted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prices(pub Vec<f64>);

impl Prices {
    pub fn uniform(m: usize) -> Self {
        Prices(vec![1.0 / m as f64; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn check_positive(&self) -> Result<(), DemandError> {
        match self.0.iter().position(|&p| p.is_nan() || p <= 0.0) {
            Some(j) => Err(DemandError::NonPositivePrice(j)),
            None => Ok(()),
        }
    }
}

impl std::ops::Index<usize> for Prices {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

/// An agent's purchased quantities, plus the per-object consumption levels
/// u_i^J for the object-structured families (needed to evaluate the utility
/// of the bundle without re-solving the inner split).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bundle {
    pub x: Vec<f64>,
    pub object_levels: Option<Vec<f64>>,
}

impl Bundle {
    pub fn spend(&self, p: &Prices) -> f64 {
        self.x.iter().zip(&p.0).map(|(x, p)| x * p).sum()
    }

    /// The bundle scaled by 1/(1+alpha); object levels scale along.
    pub fn scaled(&self, factor: f64) -> Bundle {
        Bundle {
            x: self.x.iter().map(|x| x * factor).collect(),
            object_levels: self
                .object_levels
                .as_ref()
                .map(|ls| ls.iter().map(|l| l * factor).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcessDemand {
    /// z_j = (sum_i x_ij) - 1.
    pub z: Vec<f64>,
}

impl ExcessDemand {
    /// Aggregate demand f_j(p) = z_j + 1.
    pub fn aggregate(&self) -> Vec<f64> {
        self.z.iter().map(|z| z + 1.0).collect()
    }

    pub fn max(&self) -> f64 {
        self.z.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn linf(&self) -> f64 {
        self.z.iter().map(|z| z.abs()).fold(0.0, f64::max)
    }
}

/// Object prices ptilde_i^J = sum_j a_ij^J p_j.
pub fn object_prices(objects: &[ObjectSpec], p: &Prices) -> Vec<f64> {
    objects
        .iter()
        .map(|o| o.a.iter().map(|&(j, a)| a * p[j]).sum())
        .collect()
}

/// Spend shares s_i^J = (c^J/ptilde^J)^(rho/(1-rho)) normalized over objects,
/// computed in log domain.
pub fn spend_shares(objects: &[ObjectSpec], ptilde: &[f64], rho: f64) -> Vec<f64> {
    let exponent = rho / (1.0 - rho);
    let logs: Vec<f64> = objects
        .iter()
        .zip(ptilde)
        .map(|(o, &pt)| exponent * (o.c.ln() - pt.ln()))
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

fn nested_bundle(
    budget: f64,
    objects: &[ObjectSpec],
    rho: f64,
    p: &Prices,
) -> Bundle {
    let ptilde = object_prices(objects, p);
    let shares = spend_shares(objects, &ptilde, rho);
    let levels: Vec<f64> = shares
        .iter()
        .zip(&ptilde)
        .map(|(&s, &pt)| budget * s / pt)
        .collect();
    let mut x = vec![0.0; p.len()];
    for (obj, &u) in objects.iter().zip(&levels) {
        for &(j, a) in &obj.a {
            x[j] += a * u;
        }
    }
    Bundle { x, object_levels: Some(levels) }
}

/// The CES utility viewed as singleton Leontief objects: J = {j}, a = 1,
/// c^J = c_ij, over the support.
pub fn ces_as_objects(c: &[f64]) -> Vec<ObjectSpec> {
    c.iter()
        .enumerate()
        .filter(|&(_, &cj)| cj > 0.0)
        .map(|(j, &cj)| ObjectSpec { c: cj, a: vec![(j, 1.0)] })
        .collect()
}

/// The Leontief utility as exactly one object over its support.
pub fn leontief_as_object(a: &[f64]) -> ObjectSpec {
    ObjectSpec {
        c: 1.0,
        a: a.iter().enumerate().filter(|&(_, &v)| v > 0.0).map(|(j, &v)| (j, v)).collect(),
    }
}

/// Optimal bundle of one agent at prices p.
pub fn demand(agent: &Agent, p: &Prices) -> Result<Bundle, DemandError> {
    p.check_positive()?;
    let b = agent.budget;
    match &agent.utility {
        UtilitySpec::CobbDouglas { c } => {
            // x_j = b c_j / p_j, exact (not a rho -> 0 limit)
            let x = c.iter().zip(&p.0).map(|(&cj, &pj)| b * cj / pj).collect();
            Ok(Bundle { x, object_levels: None })
        }
        UtilitySpec::Leontief { a } => {
            let obj = leontief_as_object(a);
            let ptilde: f64 = obj.a.iter().map(|&(j, av)| av * p[j]).sum();
            let level = b / ptilde;
            let mut x = vec![0.0; p.len()];
            for &(j, av) in &obj.a {
                x[j] = av * level;
            }
            Ok(Bundle { x, object_levels: Some(vec![level]) })
        }
        UtilitySpec::Ces { rho, c } => Ok(nested_bundle(b, &ces_as_objects(c), *rho, p)),
        UtilitySpec::NestedCesLeontief { rho, objects } => {
            Ok(nested_bundle(b, objects, *rho, p))
        }
        UtilitySpec::ResourceAllocation { .. } => Err(DemandError::DistortFirst),
    }
}

/// Per-agent demands and the market excess demand at prices p.
pub fn demands(market: &Market, p: &Prices) -> Result<Vec<Bundle>, DemandError> {
    market.agents.iter().map(|a| demand(a, p)).collect()
}

pub fn excess_demand(market: &Market, p: &Prices) -> Result<ExcessDemand, DemandError> {
    let bundles = demands(market, p)?;
    Ok(excess_from_bundles(&bundles, p.len()))
}

pub fn excess_from_bundles(bundles: &[Bundle], m: usize) -> ExcessDemand {
    let mut z = vec![-1.0; m];
    for b in bundles {
        for (zj, xj) in z.iter_mut().zip(&b.x) {
            *zj += xj;
        }
    }
    ExcessDemand { z }
}

// ---------------------------------------------------------------------------
// Utility evaluation (shared by the primal objective and the Def-2 checker)
// ---------------------------------------------------------------------------

/// u_i of a bundle. For object-structured families the bundle must carry
/// its object levels; for CES/Cobb-Douglas the quantities suffice.
pub fn utility(agent: &Agent, bundle: &Bundle) -> f64 {
    match &agent.utility {
        UtilitySpec::CobbDouglas { c } => {
            // prod x_j^c_j in log domain
            let mut ln_u = 0.0;
            for (&cj, &xj) in c.iter().zip(&bundle.x) {
                if cj == 0.0 {
                    continue;
                }
                if xj <= 0.0 {
                    return 0.0;
                }
                ln_u += cj * xj.ln();
            }
            ln_u.exp()
        }
        UtilitySpec::Ces { rho, c } => {
            ces_aggregate(*rho, c.iter().zip(&bundle.x).filter(|&(&cj, _)| cj > 0.0).map(
                |(&cj, &xj)| cj * xj,
            ))
        }
        UtilitySpec::Leontief { a } => {
            let mut u = f64::INFINITY;
            for (&aj, &xj) in a.iter().zip(&bundle.x) {
                if aj > 0.0 {
                    u = u.min(xj / aj);
                }
            }
            u
        }
        UtilitySpec::NestedCesLeontief { rho, objects } => {
            let levels = bundle
                .object_levels
                .as_ref()
                .expect("nested utility evaluation requires object levels");
            ces_aggregate(*rho, objects.iter().zip(levels).map(|(o, &u)| o.c * u))
        }
        UtilitySpec::ResourceAllocation { objects } => {
            let levels = bundle
                .object_levels
                .as_ref()
                .expect("resource allocation utility evaluation requires object levels");
            objects.iter().zip(levels).map(|(o, &u)| o.c * u).sum()
        }
    }
}

/// (sum_k t_k^rho)^(1/rho) in log domain. Zero terms give u = 0 when
/// rho < 0 and drop out when rho > 0.
fn ces_aggregate(rho: f64, terms: impl Iterator<Item = f64>) -> f64 {
    let mut logs = Vec::new();
    for t in terms {
        if t <= 0.0 {
            if rho < 0.0 {
                return 0.0;
            }
            continue;
        }
        logs.push(rho * t.ln());
    }
    if logs.is_empty() {
        return 0.0;
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    (lse / rho).exp()
}
