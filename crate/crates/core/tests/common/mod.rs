#![allow(dead_code)]

use fbinv::{Domain, SystemDef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Regular test systems with boxes on which they stay regular.
pub fn systems() -> Vec<SystemDef> {
    let unit = [0.0, 1.0];
    [
        ("u1^2", [1.0, 2.0]),
        ("exp(u1)", [2.0, 3.0]),
        ("u1^3/3 + x*u1 + u^2 + 2", [2.0, 3.0]),
        ("u1^2 + u", [1.0, 2.0]),
        ("exp(u1) + x*u^2 + sin(x*u1)", [2.0, 3.0]),
        ("u1^2*(1 + x^2) + u*u1 + 3*u", [1.0, 2.0]),
    ]
    .into_iter()
    .map(|(f, w)| SystemDef::parse(f, f, Domain::new(unit, unit, w).unwrap()).unwrap())
    .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn point(rng: &mut ChaCha8Rng, d: &Domain) -> [f64; 3] {
    d.ranges().map(|r| rng.gen_range(r[0]..=r[1]))
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}
