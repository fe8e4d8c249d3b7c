//! Orbit dimensions of the prolonged feedback pseudogroup on jet spaces.
//!
//! A feedback field `X = a(x) ∂x + b(x, u) ∂u` prolongs to `J^k`; its
//! components are read off the generating function
//! `φ = a_x f - a f_x - b f_u - (u1 b_u + f b_x) f_u1`. The rank of the
//! prolonged fields at a jet is the dimension of its orbit, and rank deficits
//! count the independent differential invariants.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::invariants::EPS_REG;
use crate::taylor::{index_of, multi_indices, term_count, MultiIndex, TaylorValue, MAX_DEGREE};

pub const MIN_ORDER: usize = 1;
pub const MAX_ORDER: usize = MAX_DEGREE - 1;

/// Singular values at or below this fraction of the largest are zero.
pub const RANK_CUTOFF: f64 = 1e-8;

fn check_order(k: usize, min: usize) -> Result<()> {
    if (min..=MAX_ORDER).contains(&k) {
        Ok(())
    } else {
        Err(Error::JetOrderOutOfRange { k, min, max: MAX_ORDER })
    }
}

/// Dimension of `J^k`: three base coordinates and every `f_σ`, `|σ| <= k`.
pub fn jet_dimension(k: usize) -> usize {
    3 + term_count(k)
}

/// A point of `J^{order}` with freely assigned coordinates `f_σ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JetPoint {
    pub base: [f64; 3],
    pub order: usize,
    /// `f_σ` in graded order, `term_count(order)` entries.
    pub coords: Vec<f64>,
}

impl JetPoint {
    pub fn new(base: [f64; 3], order: usize, coords: Vec<f64>) -> Result<Self> {
        if order > MAX_DEGREE {
            return Err(Error::DegreeTooLarge(order));
        }
        if coords.len() != term_count(order) {
            return Err(Error::Invalid(format!(
                "jet of order {order} needs {} coordinates, got {}",
                term_count(order),
                coords.len()
            )));
        }
        Ok(Self { base, order, coords })
    }

    /// Base and coordinates drawn uniformly from `[0.5, 2]`.
    pub fn random(order: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = [(); 3].map(|_| rng.gen_range(0.5..=2.0));
        let coords = (0..term_count(order.min(MAX_DEGREE)))
            .map(|_| rng.gen_range(0.5..=2.0))
            .collect();
        Self::new(base, order, coords)
    }

    pub fn get(&self, sigma: MultiIndex) -> f64 {
        self.coords[index_of(sigma)]
    }

    pub fn with_coord(mut self, sigma: MultiIndex, value: f64) -> Self {
        self.coords[index_of(sigma)] = value;
        self
    }

    /// `|f|`, `|f_u1|`, `|f_u1u1|` above `ε_reg`.
    pub fn is_regular(&self) -> bool {
        [[0, 0, 0], [0, 0, 1], [0, 0, 2]]
            .iter()
            .filter(|s| crate::taylor::order(**s) <= self.order)
            .all(|&s| self.get(s).abs() > EPS_REG)
    }

    /// The polynomial whose Taylor data at `base` are the coordinates.
    pub fn section(&self) -> TaylorValue {
        TaylorValue::from_coeffs(self.base, self.order, &self.coeffs()).expect("order checked on construction")
    }

    fn coeffs(&self) -> Vec<f64> {
        multi_indices(self.order)
            .iter()
            .map(|&s| self.get(s) / crate::taylor::multi_factorial(s))
            .collect()
    }
}

/// Feedback field with polynomial coefficients centered at a point:
/// `a = Σ a_i (x - x0)^i`, `b = Σ b_ij (x - x0)^i (u - u0)^j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generator {
    pub a: Vec<f64>,
    /// `(i, j, coefficient)`.
    pub b: Vec<(usize, usize, f64)>,
}

impl Generator {
    pub fn a_monomial(i: usize) -> Self {
        let mut a = vec![0.0; i + 1];
        a[i] = 1.0;
        Self { a, b: Vec::new() }
    }

    pub fn b_monomial(i: usize, j: usize) -> Self {
        Self {
            a: Vec::new(),
            b: vec![(i, j, 1.0)],
        }
    }

    /// All monomial generators of degree at most `degree`.
    pub fn basis(degree: usize) -> Vec<Generator> {
        let mut out: Vec<Generator> = (0..=degree).map(Generator::a_monomial).collect();
        for total in 0..=degree {
            for i in (0..=total).rev() {
                out.push(Generator::b_monomial(i, total - i));
            }
        }
        out
    }

    fn degree(&self) -> usize {
        let a = self.a.len().saturating_sub(1);
        self.b.iter().map(|&(i, j, _)| i + j).fold(a, usize::max)
    }

    /// `(a, b)` as series at `center` of the given degree.
    fn series(&self, center: [f64; 3], degree: usize) -> Result<(TaylorValue, TaylorValue)> {
        let dx = TaylorValue::variable(center, degree, 0)? - center[0];
        let du = TaylorValue::variable(center, degree, 1)? - center[1];
        let mut a = dx.constant_like(0.0);
        for (i, &c) in self.a.iter().enumerate() {
            if c != 0.0 {
                a = a + dx.powi(i as i32)? * c;
            }
        }
        let mut b = dx.constant_like(0.0);
        for &(i, j, c) in &self.b {
            b = b + dx.powi(i as i32)? * du.powi(j as i32)? * c;
        }
        Ok((a, b))
    }
}

/// `φ = a_x f - a f_x - b f_u - (u1 b_u + f b_x) f_u1` along the section of
/// `jp`, to degree `jp.order - 1`.
pub fn generating_function(g: &Generator, jp: &JetPoint) -> Result<TaylorValue> {
    if jp.order == 0 {
        return Err(Error::OrderExceeded { order: 1, degree: 0 });
    }
    let d = jp.order - 1;
    let f = jp.section();
    let (a, b) = g.series(jp.base, jp.order)?;
    let fd = |v| -> Result<TaylorValue> { f.derivative(v) };
    let (fx, fu, f1) = (fd(0)?, fd(1)?, fd(2)?);
    let f0 = f.truncate(d)?;
    let u1 = TaylorValue::variable(jp.base, d, 2)?;
    let (ax, bx, bu) = (a.derivative(0)?, b.derivative(0)?, b.derivative(1)?);
    let (a, b) = (a.truncate(d)?, b.truncate(d)?);
    let c = u1 * bu + f0 * bx;
    Ok(ax * f0 - a * fx - b * fu - c * f1)
}

/// Tangent vector of the prolonged field at `jp` on `J^k`: components
/// `x, u, u1`, then `f_σ` in graded order.
pub fn prolonged_vector(g: &Generator, jp: &JetPoint, k: usize) -> Result<Vec<f64>> {
    if jp.order < k + 1 {
        return Err(Error::OrderExceeded {
            order: k + 1,
            degree: jp.order,
        });
    }
    if g.degree() > MAX_DEGREE {
        return Err(Error::DegreeTooLarge(g.degree()));
    }
    let jp = JetPoint::new(jp.base, k + 1, jp.coords[..term_count(k + 1)].to_vec())?;
    let phi = generating_function(g, &jp)?;
    let (a, b) = g.series(jp.base, 1)?;
    let (a, b_val) = (a.value(), b.value());
    let (bx, bu) = (b.coeff([1, 0, 0]), b.coeff([0, 1, 0]));
    let c = jp.base[2] * bu + jp.get([0, 0, 0]) * bx;

    let mut v = Vec::with_capacity(jet_dimension(k));
    v.extend([a, b_val, c]);
    for &s in multi_indices(k) {
        let shifted = |var: usize| {
            let mut t = s;
            t[var] += 1;
            jp.get(t)
        };
        v.push(phi.partial(s)? + a * shifted(0) + b_val * shifted(1) + c * shifted(2));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankResult {
    pub k: usize,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    /// Smallest kept over largest discarded singular value; infinite when
    /// nothing is discarded.
    pub gap: f64,
}

/// Rows of prolonged monomial generators of degree `<= degree`.
pub fn generator_matrix(jp: &JetPoint, k: usize, degree: usize) -> Result<DMatrix<f64>> {
    let gens = Generator::basis(degree);
    let rows: Vec<Vec<f64>> = gens.iter().map(|g| prolonged_vector(g, jp, k)).collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(rows.len(), jet_dimension(k), |r, c| rows[r][c]))
}

pub fn numerical_rank(m: &DMatrix<f64>, k: usize) -> RankResult {
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let largest = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| s > RANK_CUTOFF * largest).count();
    let gap = match (rank, sv.get(rank)) {
        (0, _) => 0.0,
        (r, Some(&next)) if next > 0.0 => sv[r - 1] / next,
        _ => f64::INFINITY,
    };
    RankResult {
        k,
        rank,
        singular_values: sv,
        gap,
    }
}

/// Orbit dimension through an arbitrary jet (regular or not).
pub fn orbit_rank_at(jp: &JetPoint, k: usize) -> Result<RankResult> {
    check_order(k, MIN_ORDER)?;
    Ok(numerical_rank(&generator_matrix(jp, k, k + 1)?, k))
}

/// Orbit dimension through a seeded random regular jet of `J^k`.
pub fn orbit_rank(k: usize, seed: u64) -> Result<RankResult> {
    check_order(k, MIN_ORDER)?;
    orbit_rank_at(&JetPoint::random(k + 1, seed)?, k)
}

/// Invariant counts through order `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Counts {
    /// Independent invariants of pure order `k`: `k(k+1)/2 - 2`.
    pub pure_order: usize,
    /// Independent invariants of order `<= k`: `k³/6 + k²/2 - 5k/3 + 1`.
    pub cumulative: usize,
    /// `dim J^k - cumulative = (k² + 7k + 6)/2`.
    pub expected_orbit_dim: usize,
}

pub fn invariant_counts(k: usize) -> Result<Counts> {
    check_order(k, 2)?;
    let cumulative = (k * k * k + 3 * k * k - 10 * k + 6) / 6;
    Ok(Counts {
        pure_order: k * (k + 1) / 2 - 2,
        cumulative,
        expected_orbit_dim: jet_dimension(k) - cumulative,
    })
}

/// Orbit dimension expected at order `k`; `J^1` has no invariants.
pub fn expected_orbit_dim(k: usize) -> Result<usize> {
    if k == 1 {
        return Ok(jet_dimension(1));
    }
    Ok(invariant_counts(k)?.expected_orbit_dim)
}

/// `(k+1)²/2 + 23k/3 + 5/2`, a closed form quoted for the orbit dimension.
/// It is not an integer at `k = 2` and exceeds `dim J^k`, so reports show
/// it next to the measured rank instead of checking against it.
pub fn legacy_orbit_formula(k: usize) -> f64 {
    let k = k as f64;
    (k + 1.0).powi(2) / 2.0 + 23.0 * k / 3.0 + 2.5
}

/// Gradient of `J = f² f_u1u1 / ((u1 f_u1 - f) f_u1²)` on `J^2`
/// coordinates, in [`prolonged_vector`] order.
pub fn j_gradient(jp: &JetPoint) -> Result<Vec<f64>> {
    if jp.order < 2 {
        return Err(Error::OrderExceeded {
            order: 2,
            degree: jp.order,
        });
    }
    let u1 = jp.base[2];
    let (f, f1, f11) = (jp.get([0, 0, 0]), jp.get([0, 0, 1]), jp.get([0, 0, 2]));
    let d = u1 * f1 - f;
    let j = f * f * f11 / (d * f1 * f1);
    let mut grad = vec![0.0; jet_dimension(2)];
    grad[2] = -j * f1 / d;
    grad[3 + index_of([0, 0, 0])] = j * (2.0 / f + 1.0 / d);
    grad[3 + index_of([0, 0, 1])] = j * (-u1 / d - 2.0 / f1);
    grad[3 + index_of([0, 0, 2])] = j / f11;
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrbitRow {
    pub k: usize,
    pub jet_dim: usize,
    pub expected: usize,
    /// Rank at each seed.
    pub ranks: Vec<usize>,
    /// Smallest singular-value gap over the seeds.
    pub min_gap: f64,
    pub legacy_formula: f64,
    /// Rank increase over the previous order when it is in the table.
    pub invariants_added: Option<usize>,
}

impl OrbitRow {
    pub fn matches(&self) -> bool {
        self.ranks.iter().all(|&r| r == self.expected)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrbitReport {
    pub rows: Vec<OrbitRow>,
}

/// Ranks for every `k` in `orders` over `seeds`.
pub fn orbit_report(orders: &[usize], seeds: &[u64]) -> Result<OrbitReport> {
    let mut rows: Vec<OrbitRow> = Vec::new();
    for &k in orders {
        let results: Vec<RankResult> = seeds.iter().map(|&s| orbit_rank(k, s)).collect::<Result<_>>()?;
        let expected = expected_orbit_dim(k)?;
        let ranks: Vec<usize> = results.iter().map(|r| r.rank).collect();
        let invariants_added = rows.iter().find(|r| r.k + 1 == k).map(|prev| {
            // invariants of pure order k = (new jet coordinates) - (new orbit directions)
            (jet_dimension(k) - jet_dimension(k - 1)) - (expected.saturating_sub(prev.expected))
        });
        rows.push(OrbitRow {
            k,
            jet_dim: jet_dimension(k),
            expected,
            ranks,
            min_gap: results.iter().map(|r| r.gap).fold(f64::INFINITY, f64::min),
            legacy_formula: legacy_orbit_formula(k),
            invariants_added,
        });
    }
    Ok(OrbitReport { rows })
}

impl OrbitReport {
    pub fn all_match(&self) -> bool {
        self.rows.iter().all(OrbitRow::matches)
    }

    /// Plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:>2} {:>7} {:>5} {:>8} {:>10} {:>9} {:>9}",
            "k", "dim J^k", "rank", "expected", "min gap", "legacy", "new inv"
        )
        .unwrap();
        for r in &self.rows {
            let rank = if r.ranks.iter().all(|&x| x == r.ranks[0]) {
                r.ranks[0].to_string()
            } else {
                format!("{:?}", r.ranks)
            };
            let added = r.invariants_added.map_or("-".to_string(), |n| n.to_string());
            writeln!(
                out,
                "{:>2} {:>7} {:>5} {:>8} {:>10.3e} {:>9.3} {:>9}",
                r.k, r.jet_dim, rank, r.expected, r.min_gap, r.legacy_formula, added
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn jet(base: [f64; 3], order: usize, assign: &[(MultiIndex, f64)]) -> JetPoint {
        let mut jp = JetPoint::new(base, order, vec![0.0; term_count(order)]).unwrap();
        for &(s, v) in assign {
            jp = jp.with_coord(s, v);
        }
        jp
    }

    #[test]
    fn generating_function_examples() {
        let jp = jet([0.0, 0.0, 0.0], 1, &[([1, 0, 0], 3.0), ([0, 0, 0], 1.0)]);
        let phi = generating_function(&Generator::a_monomial(0), &jp).unwrap();
        assert_eq!(phi.value(), -3.0);

        let jp = jet([0.0, 0.5, 1.0], 1, &[([0, 0, 0], 2.5), ([1, 0, 0], 7.0)]);
        let phi = generating_function(&Generator::a_monomial(1), &jp).unwrap();
        assert_eq!(phi.value(), 2.5);

        // b = u, not centered: b = (u - 1) + 1
        let b = Generator {
            a: Vec::new(),
            b: vec![(0, 1, 1.0), (0, 0, 1.0)],
        };
        let jp = jet(
            [0.0, 1.0, 2.0],
            1,
            &[([0, 1, 0], 1.0), ([0, 0, 1], 1.0), ([0, 0, 0], 0.7)],
        );
        assert_eq!(generating_function(&b, &jp).unwrap().value(), -3.0);
    }

    #[test]
    fn prolonged_vector_examples() {
        let jp = jet(
            [0.3, 0.2, 0.9],
            1,
            &[([0, 0, 0], 1.3), ([1, 0, 0], 3.0), ([0, 1, 0], 0.4)],
        );
        let v = prolonged_vector(&Generator::a_monomial(0), &jp, 0).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 0.0, 0.0]);

        let jp = jet([0.0, 0.0, 1.0], 1, &[([0, 0, 0], 2.5), ([1, 0, 0], 7.0)]);
        let v = prolonged_vector(&Generator::a_monomial(1), &jp, 0).unwrap();
        assert_eq!(v[3], 2.5);

        let b = Generator {
            a: Vec::new(),
            b: vec![(0, 1, 1.0), (0, 0, 1.0)],
        };
        let jp = jet(
            [0.0, 1.0, 2.0],
            1,
            &[([0, 1, 0], 1.0), ([0, 0, 1], 1.0), ([0, 0, 0], 0.7)],
        );
        let v = prolonged_vector(&b, &jp, 0).unwrap();
        assert_eq!(v[..3], [0.0, 1.0, 2.0]);
        // φ + b f_u + u1 b_u f_u1 = -3 + 1 + 2; the f-component of any
        // feedback field on J^0 is a_x f, here 0
        assert_abs_diff_eq!(v[3], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn vector_ignores_top_order_coordinates() {
        for k in 1..=MAX_ORDER {
            let jp = JetPoint::random(k + 1, 4).unwrap();
            let mut other = jp.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for s in multi_indices(k + 1)
                .iter()
                .filter(|s| crate::taylor::order(**s) == k + 1)
            {
                other = other.with_coord(*s, rng.gen_range(-5.0..5.0));
            }
            for g in Generator::basis(k + 1) {
                let a = prolonged_vector(&g, &jp, k).unwrap();
                let b = prolonged_vector(&g, &other, k).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()), "k={k} {g:?}");
                }
            }
        }
    }

    #[test]
    fn ranks_match_expected() {
        for k in 1..=4 {
            let r = orbit_rank(k, 0).unwrap();
            assert_eq!(r.rank, expected_orbit_dim(k).unwrap(), "k={k}: {:?}", r.singular_values);
            assert!(r.gap >= 1e6, "k={k} gap {}", r.gap);
        }
        assert!(orbit_rank(5, 0).is_err());
        assert!(orbit_rank(0, 0).is_err());
    }

    #[test]
    fn counts() {
        let c = |k| {
            let c = invariant_counts(k).unwrap();
            (c.pure_order, c.cumulative, c.expected_orbit_dim)
        };
        assert_eq!(c(2), (1, 1, 12));
        assert_eq!(c(3), (4, 5, 18));
        assert_eq!(c(4), (8, 13, 25));
        for k in 2..=4 {
            assert_eq!(c(k).2, (k * k + 7 * k + 6) / 2);
        }
        assert_abs_diff_eq!(legacy_orbit_formula(2), 22.0 + 1.0 / 3.0, epsilon = 1e-12);
        assert!(invariant_counts(1).is_err());
    }

    #[test]
    fn j_is_constant_on_orbits() {
        let jp = JetPoint::random(3, 2).unwrap();
        let grad = j_gradient(&jp).unwrap();
        for g in Generator::basis(3) {
            let v = prolonged_vector(&g, &jp, 2).unwrap();
            let dot: f64 = grad.iter().zip(&v).map(|(a, b)| a * b).sum();
            let scale: f64 = grad.iter().zip(&v).map(|(a, b)| (a * b).abs()).sum();
            assert!(dot.abs() < 1e-8 * (1.0 + scale), "{g:?}: {dot}");
        }
    }

    #[test]
    fn singular_stratum_drops_rank() {
        let jp = JetPoint::random(2, 3).unwrap().with_coord([0, 0, 1], 0.0);
        assert!(!jp.is_regular());
        assert!(orbit_rank_at(&jp, 1).unwrap().rank < 7);
    }

    #[test]
    fn report_table() {
        let r = orbit_report(&[1, 2, 3, 4], &[0, 1]).unwrap();
        assert!(r.all_match());
        let added: Vec<_> = r.rows.iter().map(|r| r.invariants_added).collect();
        assert_eq!(added, vec![None, Some(1), Some(4), Some(8)]);
        assert!(r.to_table().lines().count() == 5);
    }
}
