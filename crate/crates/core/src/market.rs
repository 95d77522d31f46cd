//! Fisher market instances: parsing, normalization, validation.
//!
//! Goods are identified by string names in market files and by dense
//! indices everywhere else. Supply of every good is 1 and is never stored.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Budget sum after normalization must match 1 to this tolerance.
pub const BUDGET_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("malformed market document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported schema version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown utility family {0:?}")]
    UnknownFamily(String),
    #[error("agent {agent}: rho out of range for family {family}: {rho}")]
    RhoOutOfRange { agent: usize, family: String, rho: f64 },
    #[error("agent {agent}: missing field {field:?} for family {family}")]
    MissingField { agent: usize, family: String, field: &'static str },
    #[error("agent {agent}: unexpected field {field:?} for family {family}")]
    UnexpectedField { agent: usize, family: String, field: &'static str },
    #[error("agent {agent}: negative coefficient for good {good:?}")]
    NegativeCoefficient { agent: usize, good: String },
    #[error("agent {agent}: coefficient for good {good:?} must be strictly positive")]
    NonPositiveCoefficient { agent: usize, good: String },
    #[error("agent {agent}: good {good:?} referenced but not declared")]
    UndeclaredGood { agent: usize, good: String },
    #[error("agent {agent}: negative budget {budget}")]
    NegativeBudget { agent: usize, budget: f64 },
    #[error("agent {agent}: utility has empty support")]
    EmptySupport { agent: usize },
    #[error("agent {agent}: object {object} has an empty good set")]
    EmptyObject { agent: usize, object: usize },
    #[error("market has no goods")]
    NoGoods,
    #[error("market has no agents")]
    NoAgents,
    #[error("duplicate good name {0:?}")]
    DuplicateGood(String),
    #[error("all budgets are zero")]
    AllZeroBudgets,
    #[error("market failed validation: {0}")]
    Invalid(String),
}

/// One Leontief "object": a coefficient `c > 0` and strictly positive
/// per-good coefficients over a non-empty good set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectSpec {
    pub c: f64,
    /// Sparse (good index, a_ij^J) pairs, sorted by good index.
    pub a: Vec<(usize, f64)>,
}

impl ObjectSpec {
    /// Sum of the per-good coefficients.
    pub fn a_sum(&self) -> f64 {
        self.a.iter().map(|&(_, a)| a).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum UtilitySpec {
    /// u(x) = (sum_j (c_j x_j)^rho)^(1/rho), rho in (-inf,0) u (0,1).
    Ces { rho: f64, c: Vec<f64> },
    /// u(x) = prod_j x_j^(c_j), with sum_j c_j = 1 after normalization.
    CobbDouglas { c: Vec<f64> },
    /// u(x) = min_j x_j / a_j over the support.
    Leontief { a: Vec<f64> },
    /// CES aggregation over Leontief objects.
    NestedCesLeontief { rho: f64, objects: Vec<ObjectSpec> },
    /// Linear aggregation over Leontief objects; usable only after `distort`.
    ResourceAllocation { objects: Vec<ObjectSpec> },
}

impl UtilitySpec {
    pub fn family_name(&self) -> &'static str {
        match self {
            UtilitySpec::Ces { .. } => "ces",
            UtilitySpec::CobbDouglas { .. } => "cobb_douglas",
            UtilitySpec::Leontief { .. } => "leontief",
            UtilitySpec::NestedCesLeontief { .. } => "nested_ces_leontief",
            UtilitySpec::ResourceAllocation { .. } => "resource_allocation",
        }
    }

    /// Good indices with a positive coefficient anywhere in the utility.
    pub fn support(&self, m: usize) -> Vec<usize> {
        let mut mask = vec![false; m];
        match self {
            UtilitySpec::Ces { c, .. } | UtilitySpec::CobbDouglas { c } => {
                for (j, &cj) in c.iter().enumerate() {
                    if cj > 0.0 {
                        mask[j] = true;
                    }
                }
            }
            UtilitySpec::Leontief { a } => {
                for (j, &aj) in a.iter().enumerate() {
                    if aj > 0.0 {
                        mask[j] = true;
                    }
                }
            }
            UtilitySpec::NestedCesLeontief { objects, .. }
            | UtilitySpec::ResourceAllocation { objects } => {
                for obj in objects {
                    for &(j, _) in &obj.a {
                        mask[j] = true;
                    }
                }
            }
        }
        (0..m).filter(|&j| mask[j]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Agent {
    pub budget: f64,
    pub utility: UtilitySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Market {
    pub goods: Vec<String>,
    pub agents: Vec<Agent>,
    pub normalized: bool,
}

impl Market {
    pub fn good_count(&self) -> usize {
        self.goods.len()
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn good_index(&self, name: &str) -> Option<usize> {
        self.goods.iter().position(|g| g == name)
    }

    /// SHA-256 of the canonical JSON serialization, hex-encoded.
    pub fn hash(&self) -> String {
        let doc = serde_json::to_string(&to_file(self)).expect("market serializes");
        let digest = Sha256::digest(doc.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Serialize back to the version-1 market file format.
    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(&to_file(self)).expect("market serializes")
    }
}

// ---------------------------------------------------------------------------
// File schema (version 1)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarketFile {
    version: u32,
    goods: Vec<String>,
    agents: Vec<AgentFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    budget: f64,
    utility: UtilityFile,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtilityFile {
    family: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    a: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    objects: Option<Vec<ObjectFile>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectFile {
    c: f64,
    a: BTreeMap<String, f64>,
}

fn ces_rho_ok(rho: f64) -> bool {
    rho.is_finite() && rho != 0.0 && rho < 1.0
}

fn dense_coeffs(
    agent: usize,
    map: &BTreeMap<String, f64>,
    goods: &[String],
) -> Result<Vec<f64>, MarketError> {
    let mut out = vec![0.0; goods.len()];
    for (name, &v) in map {
        let j = goods
            .iter()
            .position(|g| g == name)
            .ok_or_else(|| MarketError::UndeclaredGood { agent, good: name.clone() })?;
        if v < 0.0 || !v.is_finite() {
            return Err(MarketError::NegativeCoefficient { agent, good: name.clone() });
        }
        out[j] = v;
    }
    Ok(out)
}

fn parse_objects(
    agent: usize,
    objects: &[ObjectFile],
    goods: &[String],
) -> Result<Vec<ObjectSpec>, MarketError> {
    let mut out = Vec::with_capacity(objects.len());
    for (k, obj) in objects.iter().enumerate() {
        if obj.a.is_empty() {
            return Err(MarketError::EmptyObject { agent, object: k });
        }
        if obj.c <= 0.0 || !obj.c.is_finite() {
            return Err(MarketError::NonPositiveCoefficient {
                agent,
                good: format!("object {k} coefficient"),
            });
        }
        let mut a = Vec::with_capacity(obj.a.len());
        for (name, &v) in &obj.a {
            let j = goods
                .iter()
                .position(|g| g == name)
                .ok_or_else(|| MarketError::UndeclaredGood { agent, good: name.clone() })?;
            // zero coefficients inside an object are rejected, not treated
            // as absence from the object
            if v <= 0.0 || !v.is_finite() {
                return Err(MarketError::NonPositiveCoefficient { agent, good: name.clone() });
            }
            a.push((j, v));
        }
        a.sort_by_key(|&(j, _)| j);
        out.push(ObjectSpec { c: obj.c, a });
    }
    Ok(out)
}

/// Parse a version-1 market document. The result is un-normalized.
pub fn parse_market(text: &str) -> Result<Market, MarketError> {
    let file: MarketFile = serde_json::from_str(text)?;
    if file.version != 1 {
        return Err(MarketError::UnsupportedVersion(file.version));
    }
    if file.goods.is_empty() {
        return Err(MarketError::NoGoods);
    }
    for (i, g) in file.goods.iter().enumerate() {
        if file.goods[..i].contains(g) {
            return Err(MarketError::DuplicateGood(g.clone()));
        }
    }
    if file.agents.is_empty() {
        return Err(MarketError::NoAgents);
    }

    let mut agents = Vec::with_capacity(file.agents.len());
    for (i, af) in file.agents.iter().enumerate() {
        if af.budget < 0.0 || !af.budget.is_finite() {
            return Err(MarketError::NegativeBudget { agent: i, budget: af.budget });
        }
        let fam = af.utility.family.as_str();
        let require_absent = |field: Option<bool>, name| -> Result<(), MarketError> {
            if field == Some(true) {
                Err(MarketError::UnexpectedField { agent: i, family: fam.to_string(), field: name })
            } else {
                Ok(())
            }
        };
        let utility = match fam {
            "ces" => {
                require_absent(af.utility.a.as_ref().map(|_| true), "a")?;
                require_absent(af.utility.objects.as_ref().map(|_| true), "objects")?;
                let rho = af.utility.rho.ok_or(MarketError::MissingField {
                    agent: i,
                    family: fam.to_string(),
                    field: "rho",
                })?;
                if !ces_rho_ok(rho) {
                    return Err(MarketError::RhoOutOfRange { agent: i, family: fam.to_string(), rho });
                }
                let c = af.utility.c.as_ref().ok_or(MarketError::MissingField {
                    agent: i,
                    family: fam.to_string(),
                    field: "c",
                })?;
                UtilitySpec::Ces { rho, c: dense_coeffs(i, c, &file.goods)? }
            }
            "cobb_douglas" => {
                require_absent(af.utility.rho.map(|_| true), "rho")?;
                require_absent(af.utility.a.as_ref().map(|_| true), "a")?;
                require_absent(af.utility.objects.as_ref().map(|_| true), "objects")?;
                let c = af.utility.c.as_ref().ok_or(MarketError::MissingField {
                    agent: i,
                    family: fam.to_string(),
                    field: "c",
                })?;
                UtilitySpec::CobbDouglas { c: dense_coeffs(i, c, &file.goods)? }
            }
            "leontief" => {
                require_absent(af.utility.rho.map(|_| true), "rho")?;
                require_absent(af.utility.c.as_ref().map(|_| true), "c")?;
                require_absent(af.utility.objects.as_ref().map(|_| true), "objects")?;
                let a = af.utility.a.as_ref().ok_or(MarketError::MissingField {
                    agent: i,
                    family: fam.to_string(),
                    field: "a",
                })?;
                UtilitySpec::Leontief { a: dense_coeffs(i, a, &file.goods)? }
            }
            "nested_ces_leontief" => {
                require_absent(af.utility.c.as_ref().map(|_| true), "c")?;
                require_absent(af.utility.a.as_ref().map(|_| true), "a")?;
                let rho = af.utility.rho.ok_or(MarketError::MissingField {
                    agent: i,
                    family: fam.to_string(),
                    field: "rho",
                })?;
                if !ces_rho_ok(rho) {
                    return Err(MarketError::RhoOutOfRange { agent: i, family: fam.to_string(), rho });
                }
                let objects = af.utility.objects.as_ref().ok_or(MarketError::MissingField {
                    agent: i,
                    family: fam.to_string(),
                    field: "objects",
                })?;
                UtilitySpec::NestedCesLeontief {
                    rho,
                    objects: parse_objects(i, objects, &file.goods)?,
                }
            }
            "resource_allocation" => {
                require_absent(af.utility.rho.map(|_| true), "rho")?;
                require_absent(af.utility.c.as_ref().map(|_| true), "c")?;
                require_absent(af.utility.a.as_ref().map(|_| true), "a")?;
                let objects = af.utility.objects.as_ref().ok_or(MarketError::MissingField {
                    agent: i,
                    family: fam.to_string(),
                    field: "objects",
                })?;
                UtilitySpec::ResourceAllocation {
                    objects: parse_objects(i, objects, &file.goods)?,
                }
            }
            other => return Err(MarketError::UnknownFamily(other.to_string())),
        };
        if utility.support(file.goods.len()).is_empty() {
            return Err(MarketError::EmptySupport { agent: i });
        }
        agents.push(Agent { budget: af.budget, utility });
    }

    Ok(Market { goods: file.goods, agents, normalized: false })
}

fn to_file(market: &Market) -> MarketFile {
    let agents = market
        .agents
        .iter()
        .map(|agent| {
            let name = |j: usize| market.goods[j].clone();
            let utility = match &agent.utility {
                UtilitySpec::Ces { rho, c } => UtilityFile {
                    family: "ces".into(),
                    rho: Some(*rho),
                    c: Some(sparse_map(c, &name)),
                    a: None,
                    objects: None,
                },
                UtilitySpec::CobbDouglas { c } => UtilityFile {
                    family: "cobb_douglas".into(),
                    rho: None,
                    c: Some(sparse_map(c, &name)),
                    a: None,
                    objects: None,
                },
                UtilitySpec::Leontief { a } => UtilityFile {
                    family: "leontief".into(),
                    rho: None,
                    c: None,
                    a: Some(sparse_map(a, &name)),
                    objects: None,
                },
                UtilitySpec::NestedCesLeontief { rho, objects } => UtilityFile {
                    family: "nested_ces_leontief".into(),
                    rho: Some(*rho),
                    c: None,
                    a: None,
                    objects: Some(objects_to_file(objects, &name)),
                },
                UtilitySpec::ResourceAllocation { objects } => UtilityFile {
                    family: "resource_allocation".into(),
                    rho: None,
                    c: None,
                    a: None,
                    objects: Some(objects_to_file(objects, &name)),
                },
            };
            AgentFile { budget: agent.budget, utility }
        })
        .collect();
    MarketFile { version: 1, goods: market.goods.clone(), agents }
}

fn sparse_map(dense: &[f64], name: &impl Fn(usize) -> String) -> BTreeMap<String, f64> {
    dense
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v > 0.0)
        .map(|(j, &v)| (name(j), v))
        .collect()
}

fn objects_to_file(objects: &[ObjectSpec], name: &impl Fn(usize) -> String) -> Vec<ObjectFile> {
    objects
        .iter()
        .map(|o| ObjectFile {
            c: o.c,
            a: o.a.iter().map(|&(j, v)| (name(j), v)).collect(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Scale the market to the canonical form used everywhere downstream:
/// budgets sum to 1, Cobb-Douglas exponents sum to 1 per agent, object
/// coefficients sum to 1 per (agent, object) with `c` absorbing the factor,
/// and per agent sum_J (c_i^J)^(rho/(1-rho)) = 1. Idempotent and
/// behavior-preserving: demand at any price vector is unchanged.
pub fn normalize(market: &Market) -> Result<Market, MarketError> {
    let m = market.good_count();
    let budget_total: f64 = market.agents.iter().map(|a| a.budget).sum();
    if budget_total <= 0.0 {
        return Err(MarketError::AllZeroBudgets);
    }

    let mut agents = Vec::with_capacity(market.agents.len());
    for (i, agent) in market.agents.iter().enumerate() {
        if agent.utility.support(m).is_empty() {
            return Err(MarketError::EmptySupport { agent: i });
        }
        let utility = match &agent.utility {
            UtilitySpec::Ces { rho, c } => {
                // joint rescale so sum_j c_j^(rho/(1-rho)) = 1, matching the
                // singleton-object nested form; demands are unaffected
                let t = joint_c_scale(c.iter().copied().filter(|&v| v > 0.0), *rho);
                UtilitySpec::Ces { rho: *rho, c: c.iter().map(|v| v / t).collect() }
            }
            UtilitySpec::CobbDouglas { c } => {
                let s: f64 = c.iter().sum();
                UtilitySpec::CobbDouglas { c: c.iter().map(|v| v / s).collect() }
            }
            UtilitySpec::Leontief { a } => {
                // single implicit object over the support, normalized to sum 1
                let s: f64 = a.iter().sum();
                UtilitySpec::Leontief { a: a.iter().map(|v| v / s).collect() }
            }
            UtilitySpec::NestedCesLeontief { rho, objects } => {
                UtilitySpec::NestedCesLeontief {
                    rho: *rho,
                    objects: normalize_objects(objects, *rho),
                }
            }
            UtilitySpec::ResourceAllocation { objects } => {
                // per-object a normalization only; the c rescaling that fixes
                // sum c^(rho/(1-rho)) = 1 happens at distortion time
                let objects = objects
                    .iter()
                    .map(|o| {
                        let s = o.a_sum();
                        ObjectSpec {
                            c: o.c / s,
                            a: o.a.iter().map(|&(j, v)| (j, v / s)).collect(),
                        }
                    })
                    .collect();
                UtilitySpec::ResourceAllocation { objects }
            }
        };
        agents.push(Agent { budget: agent.budget / budget_total, utility });
    }

    Ok(Market { goods: market.goods.clone(), agents, normalized: true })
}

/// Per-object: scale a to sum 1 and absorb the factor into c so that the
/// utility of any basket is unchanged; then rescale all c jointly so that
/// sum_J c^(rho/(1-rho)) = 1, which only rescales the utility value.
fn normalize_objects(objects: &[ObjectSpec], rho: f64) -> Vec<ObjectSpec> {
    let mut out: Vec<ObjectSpec> = objects
        .iter()
        .map(|o| {
            let s = o.a_sum();
            ObjectSpec {
                // min_j x_j/(a_j/s) = s * min_j x_j/a_j, so divide c by s
                c: o.c / s,
                a: o.a.iter().map(|&(j, v)| (j, v / s)).collect(),
            }
        })
        .collect();
    let t = joint_c_scale(out.iter().map(|o| o.c), rho);
    for o in &mut out {
        o.c /= t;
    }
    out
}

/// Solve sum (c/t)^e = 1 for t in the log domain, e = rho/(1-rho).
fn joint_c_scale(cs: impl Iterator<Item = f64>, rho: f64) -> f64 {
    let exponent = rho / (1.0 - rho);
    let logs: Vec<f64> = cs.map(|c| exponent * c.ln()).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    (lse / exponent).exp()
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    UndemandedGood { good: String },
    ZeroBudget { agent: usize },
    DegenerateObject { agent: usize, object: usize },
    BudgetSumOff { sum: f64 },
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check a normalized market for conditions that break equilibrium
/// existence with strictly positive prices. Report-returning.
pub fn validate(market: &Market) -> ValidationReport {
    let m = market.good_count();
    let mut report = ValidationReport::default();

    let mut demanded = vec![false; m];
    for agent in &market.agents {
        for j in agent.utility.support(m) {
            demanded[j] = true;
        }
    }
    for (j, &d) in demanded.iter().enumerate() {
        if !d {
            report.violations.push(Violation::UndemandedGood { good: market.goods[j].clone() });
        }
    }

    for (i, agent) in market.agents.iter().enumerate() {
        if agent.budget <= 0.0 {
            report.violations.push(Violation::ZeroBudget { agent: i });
        }
        if let UtilitySpec::NestedCesLeontief { objects, .. }
        | UtilitySpec::ResourceAllocation { objects } = &agent.utility
        {
            for (k, obj) in objects.iter().enumerate() {
                if obj.a.is_empty() || obj.a.iter().any(|&(_, v)| v <= 0.0) || obj.c <= 0.0 {
                    report.violations.push(Violation::DegenerateObject { agent: i, object: k });
                }
            }
        }
    }

    let budget_sum: f64 = market.agents.iter().map(|a| a.budget).sum();
    if (budget_sum - 1.0).abs() > BUDGET_SUM_TOL {
        report.violations.push(Violation::BudgetSumOff { sum: budget_sum });
    }

    report
}

/// Parse + normalize + validate in one step, failing on any violation.
pub fn load_market(text: &str) -> Result<Market, MarketError> {
    let market = normalize(&parse_market(text)?)?;
    let report = validate(&market);
    if !report.is_clean() {
        let msgs: Vec<String> = report.violations.iter().map(|v| format!("{v:?}")).collect();
        return Err(MarketError::Invalid(msgs.join("; ")));
    }
    Ok(market)
}
