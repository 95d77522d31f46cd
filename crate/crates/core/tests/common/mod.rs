//! Seeded random market generators shared by the integration tests.
// not every test target uses every generator
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tatonnement::market::{load_market, Market};

pub fn good_names(m: usize) -> Vec<String> {
    (0..m).map(|j| format!("g{j}")).collect()
}

/// (c, [(good, a)]) pairs for one agent's objects.
type RawObjects = Vec<(f64, Vec<(usize, f64)>)>;

fn coeff_map(entries: &[(usize, f64)]) -> Value {
    let map: serde_json::Map<String, Value> = entries
        .iter()
        .map(|&(j, v)| (format!("g{j}"), json!(v)))
        .collect();
    Value::Object(map)
}

fn market_doc(m: usize, agents: Vec<Value>) -> String {
    json!({"version": 1, "goods": good_names(m), "agents": agents}).to_string()
}

/// Pick `width` distinct good indices.
fn pick_goods(rng: &mut ChaCha8Rng, m: usize, width: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m).collect();
    for i in 0..width {
        let j = rng.gen_range(i..m);
        idx.swap(i, j);
    }
    idx.truncate(width);
    idx
}

/// Random objects for one agent: `k` objects over 1..=3 goods each.
fn random_objects(
    rng: &mut ChaCha8Rng,
    m: usize,
    k: usize,
    covered: &mut [bool],
) -> RawObjects {
    (0..k)
        .map(|_| {
            let width = rng.gen_range(1..=3.min(m));
            let a: Vec<(usize, f64)> = pick_goods(rng, m, width)
                .into_iter()
                .map(|j| {
                    covered[j] = true;
                    (j, rng.gen_range(0.2..1.0))
                })
                .collect();
            (rng.gen_range(0.5..2.0), a)
        })
        .collect()
}

/// Add every uncovered good to some object so validation passes.
fn cover_goods(
    rng: &mut ChaCha8Rng,
    covered: &[bool],
    agents: &mut [RawObjects],
) {
    for (j, &c) in covered.iter().enumerate() {
        if c {
            continue;
        }
        let i = rng.gen_range(0..agents.len());
        let k = rng.gen_range(0..agents[i].len());
        if !agents[i][k].1.iter().any(|&(g, _)| g == j) {
            agents[i][k].1.push((j, rng.gen_range(0.2..1.0)));
        }
    }
}

fn objects_json(objs: &RawObjects) -> Value {
    Value::Array(
        objs.iter()
            .map(|(c, a)| json!({"c": c, "a": coeff_map(a)}))
            .collect(),
    )
}

pub fn nested_market(seed: u64, n: usize, m: usize, k: usize, rho: f64) -> Market {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_agent: Vec<_> = (0..n)
        .map(|_| {
            let mut covered = vec![false; m];
            let objs = random_objects(&mut rng, m, k, &mut covered);
            (objs, covered)
        })
        .collect();
    let mut covered = vec![false; m];
    for (_, c) in &per_agent {
        for (j, &cj) in c.iter().enumerate() {
            covered[j] |= cj;
        }
    }
    let mut objs_only: Vec<_> = per_agent.drain(..).map(|(o, _)| o).collect();
    cover_goods(&mut rng, &covered, &mut objs_only);
    let agents: Vec<Value> = objs_only
        .iter()
        .map(|objs| {
            json!({
                "budget": rng.gen_range(0.5..2.0),
                "utility": {"family": "nested_ces_leontief", "rho": rho,
                            "objects": objects_json(objs)}
            })
        })
        .collect();
    load_market(&market_doc(m, agents)).expect("generated nested market is valid")
}

pub fn ces_market(seed: u64, n: usize, m: usize, rho: f64) -> Market {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents: Vec<Value> = (0..n)
        .map(|_| {
            let c: Vec<(usize, f64)> = (0..m).map(|j| (j, rng.gen_range(0.2..1.0))).collect();
            json!({
                "budget": rng.gen_range(0.5..2.0),
                "utility": {"family": "ces", "rho": rho, "c": coeff_map(&c)}
            })
        })
        .collect();
    load_market(&market_doc(m, agents)).expect("generated ces market is valid")
}

pub fn cobb_douglas_market(seed: u64, n: usize, m: usize) -> Market {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents: Vec<Value> = (0..n)
        .map(|_| {
            let c: Vec<(usize, f64)> = (0..m).map(|j| (j, rng.gen_range(0.2..1.0))).collect();
            json!({
                "budget": rng.gen_range(0.5..2.0),
                "utility": {"family": "cobb_douglas", "c": coeff_map(&c)}
            })
        })
        .collect();
    load_market(&market_doc(m, agents)).expect("generated cobb-douglas market is valid")
}

pub fn leontief_market(seed: u64, n: usize, m: usize) -> Market {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents: Vec<Value> = (0..n)
        .map(|_| {
            let a: Vec<(usize, f64)> = (0..m).map(|j| (j, rng.gen_range(0.2..1.0))).collect();
            json!({
                "budget": rng.gen_range(0.5..2.0),
                "utility": {"family": "leontief", "a": coeff_map(&a)}
            })
        })
        .collect();
    load_market(&market_doc(m, agents)).expect("generated leontief market is valid")
}

pub fn resource_allocation_market(seed: u64, n: usize, m: usize, k: usize) -> Market {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objs_only: Vec<_> = (0..n)
        .map(|_| {
            let mut covered = vec![false; m];
            random_objects(&mut rng, m, k, &mut covered)
        })
        .collect();
    let mut covered = vec![false; m];
    for objs in &objs_only {
        for (_, a) in objs {
            for &(j, _) in a {
                covered[j] = true;
            }
        }
    }
    cover_goods(&mut rng, &covered, &mut objs_only);
    let agents: Vec<Value> = objs_only
        .iter()
        .map(|objs| {
            json!({
                "budget": rng.gen_range(0.5..2.0),
                "utility": {"family": "resource_allocation", "objects": objects_json(objs)}
            })
        })
        .collect();
    load_market(&market_doc(m, agents)).expect("generated resource allocation market is valid")
}
