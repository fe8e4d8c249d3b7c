//! Browser bindings: invariants at a point, a signature cloud, and the
//! orbit-rank table, each returned as a JSON string.

use fbinv::invariants::{bracket_scalars_from_series, regularity, KRoute, LocalInvariants, SIGNATURE_NAMES};
use fbinv::orbits::{orbit_report, MAX_ORDER, MIN_ORDER};
use fbinv::signature::{build_cloud_with, k_authority};
use fbinv::taylor::DEFAULT_DEGREE;
use fbinv::{signature_vector, Domain, Jet, JetSource, SystemDef};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Largest grid count per axis; keeps the page responsive.
pub const MAX_GRID: usize = 15;

/// Largest number of seeds per order in the orbit table.
pub const MAX_SEEDS: usize = 20;

fn system(f: &str, domain: [f64; 6]) -> Result<SystemDef, String> {
    let [x0, x1, u0, u1, w0, w1] = domain;
    let d = Domain::new([x0, x1], [u0, u1], [w0, w1]).map_err(|e| e.to_string())?;
    SystemDef::parse("F", f, d).map_err(|e| e.to_string())
}

fn to_string(v: Value) -> String {
    v.to_string()
}

/// J, K, bracket scalars, derivatives of J, regularity flags and, when
/// regular, the signature vector of `f` at `(x, u, u1)`.
pub fn invariants_json(f: &str, x: f64, u: f64, u1: f64) -> Result<String, String> {
    let p = [x, u, u1];
    // The domain only matters for sampling; any box around p will do.
    let sys = system(f, [x - 1.0, x + 1.0, u - 1.0, u + 1.0, u1 - 1.0, u1 + 1.0])?;
    let fs = sys.series_at(p, DEFAULT_DEGREE).map_err(|e| e.to_string())?;
    let flags = regularity(&Jet::from_series(fs.truncate(2).map_err(|e| e.to_string())?)).map_err(|e| e.to_string())?;
    let failed: Vec<&str> = [
        flags.f_nonzero,
        flags.fu1_nonzero,
        flags.fu1u1_nonzero,
        flags.denom_nonzero,
    ]
    .into_iter()
    .zip(fbinv::Flag::ALL)
    .filter(|(ok, _)| !ok)
    .map(|(_, flag)| flag.label())
    .collect();
    if !failed.is_empty() {
        return Ok(to_string(json!({"point": p, "regular": false, "flags": failed})));
    }
    let local = LocalInvariants::compute(&fs, 0, KRoute::Formula).map_err(|e| e.to_string())?;
    let br = bracket_scalars_from_series(&fs).map_err(|e| e.to_string())?;
    let signature = signature_vector(&sys, p).ok().map(|s| s.to_array().to_vec());
    Ok(to_string(json!({
        "point": p,
        "regular": true,
        "flags": failed,
        "J": local.j.value(),
        "K": local.k.value(),
        "bracket": {"J": br.j, "K": br.k, "L": br.l},
        "nabla_J": local.dj.iter().map(|d| d.value()).collect::<Vec<_>>(),
        "signature_names": SIGNATURE_NAMES,
        "signature": signature,
    })))
}

/// Signature cloud of `f` on an `n³` grid of the box
/// `[x0, x1] × [u0, u1] × [w0, w1]` (`w` is `u1`).
pub fn signature_json(f: &str, domain: [f64; 6], n: usize) -> Result<String, String> {
    if !(2..=MAX_GRID).contains(&n) {
        return Err(format!("grid count must lie in 2..={MAX_GRID}, got {n}"));
    }
    let sys = system(f, domain)?;
    let grid = [n; 3];
    let route = k_authority(&sys, &sys.domain().grid(grid), 25).route;
    let cloud = build_cloud_with(&sys, grid, route).map_err(|e| e.to_string())?;
    Ok(to_string(json!({
        "names": SIGNATURE_NAMES,
        "points": cloud.samples.iter().map(|s| s.point).collect::<Vec<_>>(),
        "values": cloud.samples.iter().map(|s| s.values.to_vec()).collect::<Vec<_>>(),
        "skipped": cloud.skipped.len(),
        "intrinsic_dim": cloud.intrinsic_dim,
        "chart": cloud.chart_names(),
        "k_route": format!("{:?}", cloud.route),
    })))
}

/// Orbit ranks for `k = 1..=max_k` over `seeds` random regular jets.
pub fn orbit_json(max_k: usize, seeds: usize) -> Result<String, String> {
    if !(MIN_ORDER..=MAX_ORDER).contains(&max_k) {
        return Err(format!("k must lie in {MIN_ORDER}..={MAX_ORDER}, got {max_k}"));
    }
    if !(1..=MAX_SEEDS).contains(&seeds) {
        return Err(format!("seeds must lie in 1..={MAX_SEEDS}, got {seeds}"));
    }
    let orders: Vec<usize> = (MIN_ORDER..=max_k).collect();
    let seed_list: Vec<u64> = (0..seeds as u64).collect();
    let report = orbit_report(&orders, &seed_list).map_err(|e| e.to_string())?;
    let mut v = serde_json::to_value(&report).map_err(|e| e.to_string())?;
    v["all_match"] = json!(report.all_match());
    Ok(to_string(v))
}

#[wasm_bindgen]
pub fn invariants_at(f: &str, x: f64, u: f64, u1: f64) -> Result<String, JsValue> {
    invariants_json(f, x, u, u1).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn signature_cloud(
    f: &str,
    x0: f64,
    x1: f64,
    u0: f64,
    u1: f64,
    w0: f64,
    w1: f64,
    n: usize,
) -> Result<String, JsValue> {
    signature_json(f, [x0, x1, u0, u1, w0, w1], n).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn orbit_table(max_k: usize, seeds: usize) -> Result<String, JsValue> {
    orbit_json(max_k, seeds).map_err(|e| JsValue::from_str(&e))
}
