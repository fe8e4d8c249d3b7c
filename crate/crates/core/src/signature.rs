//! Sampled signature manifolds and the equivalence decision.
//!
//! A cloud stores, for every regular grid point, the 14 signature values
//! together with their exact Jacobian in the base coordinates. The Jacobian
//! gives the intrinsic dimension and the chart test directly, and lets the
//! comparison project samples of one system onto the signature manifold of
//! the other by Newton's method instead of interpolating between samples.

use std::collections::HashSet;
use std::io::{self, Write};

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::invariants::{signature_with_jacobian, KRoute, LocalInvariants, SIGNATURE_NAMES};
use crate::system::{Domain, JetSource};
use crate::taylor::TaylorValue;

/// Signature coordinates that may serve as chart coordinates:
/// `j, j1, j2, j3, k`.
pub const CHART_CANDIDATES: [usize; 5] = [0, 1, 2, 3, 10];

/// Singular values below this fraction of the largest do not count
/// towards the rank.
pub const RANK_RATIO: f64 = 1e-3;

/// Smallest accepted chart margin.
pub const MIN_CHART_MARGIN: f64 = 1e-6;

/// Neighbors that make a chart neighborhood densely covered.
pub const COVERAGE_NEIGHBORS: usize = 12;

pub const MIN_DIMENSION_SAMPLES: usize = 30;

const SPREAD_FLOOR: f64 = 1e-12;
const ABS_RANK_FLOOR: f64 = 1e-8;

pub const CSV_HEADER: &str = "x,u,u1,j,j1,j2,j3,j11,j12,j13,j22,j23,j33,k,k1,k2,k3";
pub const SKIPPED_CSV_HEADER: &str = "x,u,u1,reason";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub point: [f64; 3],
    pub values: [f64; 14],
    /// `∂ values[c] / ∂ point[m]`.
    pub jacobian: [[f64; 3]; 14],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Skipped {
    pub point: [f64; 3],
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignatureCloud {
    pub system: String,
    pub domain: Domain,
    pub route: KRoute,
    pub samples: Vec<Sample>,
    pub skipped: Vec<Skipped>,
    pub intrinsic_dim: Option<usize>,
    /// Indices into the signature vector.
    pub chart: Option<[usize; 3]>,
    /// Cloud-wide chart margin of every candidate triple.
    pub chart_margins: Vec<([usize; 3], f64)>,
}

impl SignatureCloud {
    pub fn chart_names(&self) -> Option<[&'static str; 3]> {
        self.chart.map(|t| t.map(|c| SIGNATURE_NAMES[c]))
    }

    pub fn margin(&self, triple: [usize; 3]) -> f64 {
        self.chart_margins
            .iter()
            .find(|(t, _)| *t == triple)
            .map_or(0.0, |(_, m)| *m)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for s in &self.samples {
            let row: Vec<String> = s.point.iter().chain(&s.values).map(|v| format_float(*v)).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_skipped_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{SKIPPED_CSV_HEADER}")?;
        for s in &self.skipped {
            let p = s.point.map(format_float);
            writeln!(out, "{},{},{},{}", p[0], p[1], p[2], s.reason)?;
        }
        Ok(())
    }
}

/// 17 significant digits, the shortest width that round-trips every `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Short, comma-free reason for skipping a point.
pub fn skip_reason(err: &Error) -> String {
    match err {
        Error::NonRegular(flag) => flag.label().to_string(),
        Error::OutsideImage(..) => "outside_image".to_string(),
        Error::SingularTransform(_) => "singular_transform".to_string(),
        Error::Domain { func, .. } => format!("domain_{func}"),
        Error::RelationViolation { .. } => "relation_violation".to_string(),
        Error::DivisionBySingular(_) => "singular_division".to_string(),
        _ => "evaluation_error".to_string(),
    }
}

/// Signature values and Jacobian of `system` at `p`.
pub fn evaluate_sample(system: &dyn JetSource, p: [f64; 3], route: KRoute) -> Result<Sample> {
    let fs = system.series_at(p, crate::invariants::signature_input_degree(1))?;
    let (sv, jacobian) = signature_with_jacobian(&fs, route)?;
    let values = sv.to_array();
    if values.iter().chain(jacobian.as_flattened()).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite signature".to_string()));
    }
    Ok(Sample {
        point: p,
        values,
        jacobian,
    })
}

pub fn build_cloud(system: &dyn JetSource, grid: [usize; 3]) -> Result<SignatureCloud> {
    build_cloud_with(system, grid, KRoute::Formula)
}

pub fn build_cloud_with(system: &dyn JetSource, grid: [usize; 3], route: KRoute) -> Result<SignatureCloud> {
    if grid.iter().any(|&n| n < 2) {
        return Err(Error::Invalid(format!("grid counts must be at least 2, got {grid:?}")));
    }
    let domain = system.domain();
    let evaluated: Vec<std::result::Result<Sample, Skipped>> = domain
        .grid(grid)
        .into_par_iter()
        .map(|p| {
            evaluate_sample(system, p, route).map_err(|e| Skipped {
                point: p,
                reason: match e {
                    Error::Invalid(_) => "non_finite".to_string(),
                    e => skip_reason(&e),
                },
            })
        })
        .collect();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for r in evaluated {
        match r {
            Ok(s) => samples.push(s),
            Err(s) => skipped.push(s),
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut cloud = SignatureCloud {
        system: system.name().to_string(),
        domain,
        route,
        samples,
        skipped,
        intrinsic_dim: None,
        chart: None,
        chart_margins: Vec::new(),
    };
    cloud.intrinsic_dim = intrinsic_dimension(&cloud).ok();
    if cloud.intrinsic_dim == Some(3) {
        cloud.chart_margins = chart_margins(&cloud);
        cloud.chart = select_chart(&cloud);
    }
    Ok(cloud)
}

/// Per-coordinate spread (max - min) over all points, `1` when degenerate.
pub fn spreads<'a>(points: impl IntoIterator<Item = &'a [f64; 14]>) -> [f64; 14] {
    let mut lo = [f64::INFINITY; 14];
    let mut hi = [f64::NEG_INFINITY; 14];
    for v in points {
        for c in 0..14 {
            lo[c] = lo[c].min(v[c]);
            hi[c] = hi[c].max(v[c]);
        }
    }
    let mut out = [1.0; 14];
    for c in 0..14 {
        let s = hi[c] - lo[c];
        if s.is_finite() && s >= SPREAD_FLOOR {
            out[c] = s;
        }
    }
    out
}

/// Jacobian rescaled to unit signature spreads and unit box edges.
fn normalized_jacobian(s: &Sample, spread: &[f64; 14], span: &[f64; 3]) -> SMatrix<f64, 14, 3> {
    SMatrix::<f64, 14, 3>::from_fn(|c, m| s.jacobian[c][m] * span[m] / spread[c])
}

fn box_span(domain: &Domain) -> [f64; 3] {
    domain
        .ranges()
        .map(|r| if r[1] - r[0] > 0.0 { r[1] - r[0] } else { 1.0 })
}

fn numerical_rank(singular: &[f64]) -> usize {
    let max = singular.iter().cloned().fold(0.0, f64::max);
    let floor = (RANK_RATIO * max).max(ABS_RANK_FLOOR);
    singular.iter().filter(|&&s| s > floor).count()
}

/// Median over samples of the numerical rank of the normalized signature
/// Jacobian.
pub fn intrinsic_dimension(cloud: &SignatureCloud) -> Result<usize> {
    let n = cloud.samples.len();
    if n < MIN_DIMENSION_SAMPLES {
        return Err(Error::TooFewSamples {
            found: n,
            needed: MIN_DIMENSION_SAMPLES,
        });
    }
    let spread = spreads(cloud.samples.iter().map(|s| &s.values));
    let span = box_span(&cloud.domain);
    let mut ranks: Vec<usize> = cloud
        .samples
        .iter()
        .map(|s| {
            let sv = normalized_jacobian(s, &spread, &span).singular_values();
            numerical_rank(sv.as_slice())
        })
        .collect();
    ranks.sort_unstable();
    Ok(ranks[n / 2])
}

fn triples() -> Vec<[usize; 3]> {
    let c = CHART_CANDIDATES;
    let mut out = Vec::with_capacity(10);
    for a in 0..5 {
        for b in a + 1..5 {
            for d in b + 1..5 {
                out.push([c[a], c[b], c[d]]);
            }
        }
    }
    out
}

/// Smallest singular value of the tangent basis restricted to each triple,
/// minimized over the cloud.
pub fn chart_margins(cloud: &SignatureCloud) -> Vec<([usize; 3], f64)> {
    let spread = spreads(cloud.samples.iter().map(|s| &s.values));
    let span = box_span(&cloud.domain);
    let bases: Vec<DMatrix<f64>> = cloud
        .samples
        .iter()
        .map(|s| {
            let jn = normalized_jacobian(s, &spread, &span);
            let svd = jn.svd(true, false);
            DMatrix::from_column_slice(14, 3, svd.u.expect("left singular vectors").as_slice())
        })
        .collect();
    triples()
        .into_iter()
        .map(|t| {
            let margin = bases
                .iter()
                .map(|u| {
                    let sub = Matrix3::from_fn(|r, c| u[(t[r], c)]);
                    sub.singular_values().min()
                })
                .fold(f64::INFINITY, f64::min);
            (t, if margin.is_finite() { margin } else { 0.0 })
        })
        .collect()
}

/// Triple of `j, j1, j2, j3, k` with the largest margin, if any margin
/// reaches [`MIN_CHART_MARGIN`].
pub fn select_chart(cloud: &SignatureCloud) -> Option<[usize; 3]> {
    if cloud.intrinsic_dim != Some(3) {
        return None;
    }
    let margins = if cloud.chart_margins.is_empty() {
        chart_margins(cloud)
    } else {
        cloud.chart_margins.clone()
    };
    let mut best: Option<([usize; 3], f64)> = None;
    for (t, m) in margins {
        if m >= MIN_CHART_MARGIN && best.is_none_or(|(_, b)| m > b) {
            best = Some((t, m));
        }
    }
    best.map(|(t, _)| t)
}

/// Coefficients `λ` of `dV = Σ λ_i dJ_i` at the common base point.
pub fn tresse(v: &TaylorValue, basis: &[TaylorValue; 3]) -> Result<[f64; 3]> {
    let grad = |s: &TaylorValue| -> Result<Vector3<f64>> {
        if s.degree() < 1 {
            return Err(Error::OrderExceeded {
                order: 1,
                degree: s.degree(),
            });
        }
        if s.base() != v.base() {
            return Err(Error::SeriesMismatch("Tresse basis at a different point"));
        }
        Ok(Vector3::new(s.coeff([1, 0, 0]), s.coeff([0, 1, 0]), s.coeff([0, 0, 1])))
    };
    let gv = grad(v)?;
    let mut m = Matrix3::zeros();
    for (i, b) in basis.iter().enumerate() {
        m.set_column(i, &grad(b)?);
    }
    let sv = m.singular_values();
    let cond = if sv.min() > 0.0 {
        sv.max() / sv.min()
    } else {
        f64::INFINITY
    };
    if cond.is_nan() || cond > 1e10 {
        return Err(Error::DependentBasis(cond));
    }
    let lambda = m.lu().solve(&gv).ok_or(Error::DependentBasis(cond))?;
    Ok([lambda[0], lambda[1], lambda[2]])
}

/// Outcome of checking the explicit `K` formula against the bracket value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KAuthority {
    pub route: KRoute,
    pub checked: usize,
    pub disagreements: usize,
    pub max_relative_difference: f64,
}

impl KAuthority {
    /// One-line report when the bracket value had to take over.
    pub fn discrepancy(&self) -> Option<String> {
        (self.route == KRoute::Bracket).then(|| {
            format!(
                "K formula disagrees with the bracket value at {} of {} points (max relative difference {:.3e}); using the bracket value",
                self.disagreements, self.checked, self.max_relative_difference
            )
        })
    }
}

/// Cross-checks `K` at up to `max_points` evenly spaced `points`; the
/// bracket value becomes authoritative when most regular points disagree
/// beyond `1e-6` relative.
pub fn k_authority(system: &dyn JetSource, points: &[[f64; 3]], max_points: usize) -> KAuthority {
    let stride = points.len().div_ceil(max_points.max(1)).max(1);
    let mut out = KAuthority {
        route: KRoute::Formula,
        checked: 0,
        disagreements: 0,
        max_relative_difference: 0.0,
    };
    for p in points.iter().step_by(stride) {
        let Ok(fs) = system.series_at(*p, crate::taylor::DEFAULT_DEGREE) else {
            continue;
        };
        let Ok((formula, bracket)) = crate::invariants::k_cross_check(&fs) else {
            continue;
        };
        let rel = (formula - bracket).abs() / (1.0 + bracket.abs());
        out.checked += 1;
        out.max_relative_difference = out.max_relative_difference.max(rel);
        if rel.is_nan() || rel > 1e-6 {
            out.disagreements += 1;
        }
    }
    if out.checked > 0 && 2 * out.disagreements > out.checked {
        out.route = KRoute::Bracket;
    }
    out
}

/// Both sides of `∇_i K = Σ_j ∇_i(J_j) DK/DJ_j` with `J_j = ∇_j J`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RijCheck {
    pub lhs: [f64; 3],
    pub rhs: [f64; 3],
    pub lambda: [f64; 3],
}

impl RijCheck {
    pub fn max_relative_error(&self) -> f64 {
        (0..3)
            .map(|i| (self.lhs[i] - self.rhs[i]).abs() / (1.0 + self.lhs[i].abs()))
            .fold(0.0, f64::max)
    }
}

pub fn rij_check(fs: &TaylorValue) -> Result<RijCheck> {
    let local = LocalInvariants::compute(fs, 1, KRoute::Formula)?;
    let lambda = tresse(&local.k, &local.dj)?;
    let mut lhs = [0.0; 3];
    let mut rhs = [0.0; 3];
    for i in 1..=3 {
        lhs[i - 1] = local.dk(i)?.value();
        rhs[i - 1] = (1..=3)
            .map(|j| Ok(local.second(i, j)?.value() * lambda[j - 1]))
            .sum::<Result<f64>>()?;
    }
    Ok(RijCheck { lhs, rhs, lambda })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Equivalent,
    NotEquivalent,
    Inconclusive,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Equivalent => "EQUIVALENT",
            Status::NotEquivalent => "NOT_EQUIVALENT",
            Status::Inconclusive => "INCONCLUSIVE",
        }
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub status: Status,
    pub overlap_fraction: f64,
    pub max_residual: f64,
    pub chart: Option<[&'static str; 3]>,
    /// Base point of the first system that certifies the verdict.
    pub witness: Option<[f64; 3]>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareOptions {
    pub tol_rel: f64,
    pub min_overlap: f64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            tol_rel: 1e-4,
            min_overlap: 0.3,
        }
    }
}

/// A cloud together with the system that produced it.
#[derive(Clone, Copy)]
pub struct Side<'a> {
    pub cloud: &'a SignatureCloud,
    pub source: &'a dyn JetSource,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn normalize(v: &[f64; 14], spread: &[f64; 14]) -> [f64; 14] {
    std::array::from_fn(|c| v[c] / spread[c])
}

/// Points with exact duplicates (to 1e-12) removed, first occurrence kept.
fn distinct(points: &[[f64; 14]]) -> Vec<usize> {
    let mut seen = HashSet::new();
    (0..points.len())
        .filter(|&i| seen.insert(points[i].map(|v| (v * 1e12).round() as i64)))
        .collect()
}

/// Distance from each point to its `k`-th nearest other point.
fn kth_neighbor_distances<const N: usize>(points: &[[f64; N]], k: usize) -> Vec<f64> {
    if k == 0 || points.len() <= 1 {
        return vec![0.0; points.len()];
    }
    let k = k.min(points.len() - 1);
    points
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| dist(a, b))
                .collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn nearest<const N: usize>(a: &[f64; N], points: &[[f64; N]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, b) in points.iter().enumerate() {
        let d = dist(a, b);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

struct Separation {
    separated: bool,
    closest: f64,
    witness: [f64; 3],
}

/// Each point of `a` is farther from every sample of `b` than `10 tol`
/// plus the local sampling radius of `b` at its nearest sample.
fn one_sided_separation(
    a: &[[f64; 14]],
    a_pts: &[[f64; 3]],
    b: &[[f64; 14]],
    b_radius: &[f64],
    tol: f64,
) -> Separation {
    let found: Vec<(f64, bool)> = a
        .par_iter()
        .map(|p| {
            let (j, d) = nearest(p, b);
            (d, d > 10.0 * tol + b_radius[j])
        })
        .collect();
    let (mut closest, mut witness) = (f64::INFINITY, a_pts[0]);
    for (i, (d, _)) in found.iter().enumerate() {
        if *d < closest {
            closest = *d;
            witness = a_pts[i];
        }
    }
    Separation {
        separated: found.iter().all(|f| f.1),
        closest,
        witness,
    }
}

fn chart_coords(v: &[f64; 14], t: [usize; 3], spread: &[f64; 14]) -> [f64; 3] {
    t.map(|c| v[c] / spread[c])
}

/// Newton solve for `q` with `σ(q)[t] = target[t]`, from `seed`.
fn project(
    source: &dyn JetSource,
    route: KRoute,
    target: &[f64; 14],
    t: [usize; 3],
    spread: &[f64; 14],
    seed: [f64; 3],
) -> Option<Sample> {
    let domain = source.domain();
    let chart_err = |s: &Sample| -> (Vector3<f64>, f64) {
        let r = Vector3::from_fn(|k, _| s.values[t[k]] - target[t[k]]);
        let n = (0..3).map(|k| (r[k] / spread[t[k]]).abs()).fold(0.0, f64::max);
        (r, n)
    };
    let mut s = evaluate_sample(source, seed, route).ok()?;
    let (mut r, mut err) = chart_err(&s);
    for _ in 0..20 {
        if err < 1e-12 {
            break;
        }
        let jac = Matrix3::from_fn(|k, m| s.jacobian[t[k]][m]);
        let step = jac.lu().solve(&r)?;
        let mut lambda = 1.0;
        loop {
            let q = std::array::from_fn(|m| s.point[m] - lambda * step[m]);
            let trial = domain
                .contains_with_slack(q, 1e-9)
                .then(|| evaluate_sample(source, q, route).ok())
                .flatten();
            if let Some(next) = trial {
                let (rn, en) = chart_err(&next);
                if en < err {
                    s = next;
                    r = rn;
                    err = en;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-4 {
                return (err < 1e-9).then_some(s);
            }
        }
    }
    (err < 1e-9).then_some(s)
}

struct GraphFit {
    covered: usize,
    max_residual: f64,
    worst: Option<[f64; 3]>,
    failed_projections: usize,
}

/// Outcome for one sample: `None` when outside the covered region, else
/// the projection result (`None` when it failed) with residual and point.
type SampleFit = Option<Option<(f64, [f64; 3])>>;

/// Residuals of the samples of `from` against the signature manifold of
/// `onto`, in chart `t`.
fn graph_residuals(from: &SignatureCloud, onto: Side<'_>, t: [usize; 3], spread: &[f64; 14]) -> GraphFit {
    let onto_chart: Vec<[f64; 3]> = onto
        .cloud
        .samples
        .iter()
        .map(|s| chart_coords(&s.values, t, spread))
        .collect();
    let mut radii = kth_neighbor_distances(&onto_chart, COVERAGE_NEIGHBORS);
    radii.sort_by(f64::total_cmp);
    let radius = radii[radii.len() / 2];

    let results: Vec<SampleFit> = from
        .samples
        .par_iter()
        .map(|a| {
            let c = chart_coords(&a.values, t, spread);
            let inside = onto_chart.iter().filter(|b| dist(&c, *b) <= radius).count();
            if inside < COVERAGE_NEIGHBORS {
                return None;
            }
            let (j, _) = nearest(&c, &onto_chart);
            let seed = onto.cloud.samples[j].point;
            Some(
                project(onto.source, onto.cloud.route, &a.values, t, spread, seed).map(|s| {
                    let res = (0..14)
                        .filter(|c| !t.contains(c))
                        .map(|c| (s.values[c] - a.values[c]).abs() / spread[c])
                        .fold(0.0, f64::max);
                    (res, a.point)
                }),
            )
        })
        .collect();

    let mut fit = GraphFit {
        covered: 0,
        max_residual: 0.0,
        worst: None,
        failed_projections: 0,
    };
    for r in results.into_iter().flatten() {
        match r {
            Some((res, p)) => {
                fit.covered += 1;
                if res > fit.max_residual || fit.worst.is_none() {
                    fit.max_residual = fit.max_residual.max(res);
                    fit.worst = Some(p);
                }
            }
            None => fit.failed_projections += 1,
        }
    }
    fit
}

/// Decides whether two sampled signature manifolds coincide.
pub fn compare(f: Side<'_>, g: Side<'_>, opts: CompareOptions) -> Result<Verdict> {
    if f.cloud.samples.is_empty() || g.cloud.samples.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let tol = opts.tol_rel;
    let spread = spreads(f.cloud.samples.iter().chain(&g.cloud.samples).map(|s| &s.values));
    let mut notes = Vec::new();

    let reduced = |c: &SignatureCloud| -> (Vec<[f64; 14]>, Vec<[f64; 3]>) {
        let norm: Vec<[f64; 14]> = c.samples.iter().map(|s| normalize(&s.values, &spread)).collect();
        let keep = distinct(&norm);
        (
            keep.iter().map(|&i| norm[i]).collect(),
            keep.iter().map(|&i| c.samples[i].point).collect(),
        )
    };
    let (fn_pts, f_base) = reduced(f.cloud);
    let (gn_pts, g_base) = reduced(g.cloud);
    let radius = |pts: &[[f64; 14]], dim: Option<usize>| kth_neighbor_distances(pts, 2 * dim.unwrap_or(3));
    let f_radius = radius(&fn_pts, f.cloud.intrinsic_dim);
    let g_radius = radius(&gn_pts, g.cloud.intrinsic_dim);

    let fg = one_sided_separation(&fn_pts, &f_base, &gn_pts, &g_radius, tol);
    let gf = one_sided_separation(&gn_pts, &g_base, &fn_pts, &f_radius, tol);
    if fg.separated && gf.separated {
        notes.push(format!(
            "signature clouds are separated: closest approach {} (normalized) at first-system point ({}, {}, {})",
            fg.closest, fg.witness[0], fg.witness[1], fg.witness[2]
        ));
        return Ok(Verdict {
            status: Status::NotEquivalent,
            overlap_fraction: 0.0,
            max_residual: fg.closest.min(gf.closest),
            chart: None,
            witness: Some(fg.witness),
            notes,
        });
    }

    if f.cloud.intrinsic_dim != Some(3) || g.cloud.intrinsic_dim != Some(3) {
        notes.push(format!(
            "signature manifolds have dimensions {} and {}, not 3: the systems are not regular and equal signatures do not decide equivalence",
            dim_text(f.cloud.intrinsic_dim),
            dim_text(g.cloud.intrinsic_dim)
        ));
        return Ok(Verdict {
            status: Status::Inconclusive,
            overlap_fraction: 0.0,
            max_residual: fg.closest.max(gf.closest),
            chart: None,
            witness: None,
            notes,
        });
    }

    let mut chart: Option<([usize; 3], f64)> = None;
    for t in triples() {
        let m = f.cloud.margin(t).min(g.cloud.margin(t));
        if m >= MIN_CHART_MARGIN && chart.is_none_or(|(_, b)| m > b) {
            chart = Some((t, m));
        }
    }
    let Some((t, margin)) = chart else {
        notes.push("no triple of j, j1, j2, j3, k is a chart on both signature manifolds".to_string());
        return Ok(Verdict {
            status: Status::Inconclusive,
            overlap_fraction: 0.0,
            max_residual: 0.0,
            chart: None,
            witness: None,
            notes,
        });
    };
    let names = t.map(|c| SIGNATURE_NAMES[c]);
    notes.push(format!(
        "chart ({}, {}, {}) with margin {margin:.3e}",
        names[0], names[1], names[2]
    ));

    let a = graph_residuals(f.cloud, g, t, &spread);
    let b = graph_residuals(g.cloud, f, t, &spread);
    let total = f.cloud.samples.len() + g.cloud.samples.len();
    let overlap = (a.covered + b.covered) as f64 / total as f64;
    let max_residual = a.max_residual.max(b.max_residual);
    let witness = if a.max_residual >= b.max_residual {
        a.worst
    } else {
        b.worst
    };
    if a.failed_projections + b.failed_projections > 0 {
        notes.push(format!(
            "{} covered samples could not be projected and were left out",
            a.failed_projections + b.failed_projections
        ));
    }
    notes.push(format!(
        "{} of {} first-system and {} of {} second-system samples compared",
        a.covered,
        f.cloud.samples.len(),
        b.covered,
        g.cloud.samples.len()
    ));

    let status = if a.covered + b.covered > 0 && max_residual > 10.0 * tol {
        Status::NotEquivalent
    } else if overlap >= opts.min_overlap && max_residual <= tol {
        Status::Equivalent
    } else {
        if overlap < opts.min_overlap {
            notes.push(format!("overlap {overlap:.3} below the required {}", opts.min_overlap));
        } else {
            notes.push(format!(
                "residual {max_residual:.3e} between tolerance and the certified margin"
            ));
        }
        Status::Inconclusive
    };
    Ok(Verdict {
        status,
        overlap_fraction: overlap,
        max_residual,
        chart: Some(names),
        witness: if status == Status::Equivalent { None } else { witness },
        notes,
    })
}

fn dim_text(d: Option<usize>) -> String {
    d.map_or_else(|| "unknown".to_string(), |d| d.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::SystemDef;
    use approx::assert_abs_diff_eq;

    fn sys(f: &str, w: [f64; 2]) -> SystemDef {
        let d = Domain::new([0.0, 1.0], [0.0, 1.0], w).unwrap();
        SystemDef::parse(f, f, d).unwrap()
    }

    #[test]
    fn constant_cloud() {
        let d = Domain::new([-1.0, 1.0], [-1.0, 1.0], [1.0, 2.0]).unwrap();
        let s = SystemDef::parse("F", "u1^2", d).unwrap();
        let c = build_cloud(&s, [5, 5, 5]).unwrap();
        assert_eq!(c.samples.len(), 125);
        assert!(c.skipped.is_empty());
        for smp in &c.samples {
            assert_abs_diff_eq!(smp.values[0], 0.5, epsilon = 1e-14);
            assert!(smp.values[1..].iter().all(|v| v.abs() < 1e-12));
        }
        assert_eq!(c.intrinsic_dim, Some(0));
        assert_eq!(c.chart, None);
    }

    #[test]
    fn empty_cloud() {
        assert_eq!(
            build_cloud(&sys("u1", [1.0, 2.0]), [3, 3, 3]).unwrap_err(),
            Error::EmptyCloud
        );
        assert!(build_cloud(&sys("u1^2", [1.0, 2.0]), [1, 3, 3]).is_err());
    }

    #[test]
    fn curve_cloud() {
        let c = build_cloud(&sys("exp(u1)", [2.0, 3.0]), [4, 4, 6]).unwrap();
        assert_eq!(c.intrinsic_dim, Some(1));
        for s in &c.samples {
            assert!(s.values[0] >= 0.5 - 1e-12 && s.values[0] <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn generic_cloud_has_a_chart() {
        let c = build_cloud(&sys("u1^3/3 + x*u1 + u^2 + 2", [2.0, 3.0]), [5, 5, 5]).unwrap();
        assert_eq!(c.intrinsic_dim, Some(3));
        let t = c.chart.expect("chart");
        assert!(c.margin(t) >= MIN_CHART_MARGIN);
        assert_eq!(c.chart_margins.len(), 10);
    }

    #[test]
    fn constant_j_leaves_no_chart() {
        // J = 1/2 identically, so j1 = j2 = j3 = 0 and only k varies
        let c = build_cloud(&sys("u1^2*exp(x*u)", [1.0, 2.0]), [5, 5, 5]).unwrap();
        assert!(c.samples.iter().all(|s| (s.values[0] - 0.5).abs() < 1e-12));
        assert!(c.samples.iter().all(|s| s.values[1..4].iter().all(|v| v.abs() < 1e-10)));
        assert_eq!(c.intrinsic_dim, Some(3));
        assert_eq!(c.chart, None);
        assert!(c.chart_margins.iter().all(|(_, m)| *m < MIN_CHART_MARGIN));
    }

    #[test]
    fn tresse_examples() {
        let s = sys("u1^3/3 + x*u1 + u^2 + 2", [2.0, 3.0]);
        let fs = s.series_at([0.4, 0.3, 2.5], 5).unwrap();
        let local = LocalInvariants::compute(&fs, 1, KRoute::Formula).unwrap();
        let basis = local.dj.map(|b| b.truncate(1).unwrap());
        let l = tresse(&basis[0], &basis).unwrap();
        for (a, b) in l.iter().zip([1.0, 0.0, 0.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let zero = tresse(&basis[0].constant_like(3.0), &basis).unwrap();
        assert_eq!(zero, [0.0, 0.0, 0.0]);
        let l = tresse(&(basis[0] * 2.0 + basis[1] * 3.0), &basis).unwrap();
        for (a, b) in l.iter().zip([2.0, 3.0, 0.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-10);
        }
        let dep = [basis[0], basis[0] * 2.0, basis[2]];
        assert!(matches!(tresse(&basis[1], &dep), Err(Error::DependentBasis(_))));
    }

    #[test]
    fn rij_lemma() {
        let s = sys("u1^3/3 + x*u1 + u^2 + 2", [2.0, 3.0]);
        let rc = rij_check(&s.series_at([0.4, 0.3, 2.5], 5).unwrap()).unwrap();
        assert!(rc.max_relative_error() < 1e-9, "{rc:?}");
    }

    #[test]
    fn self_comparison_is_equivalent() {
        let s = sys("u1^3/3 + x*u1 + u^2 + 2", [2.0, 3.0]);
        let c = build_cloud(&s, [5, 5, 5]).unwrap();
        let side = Side { cloud: &c, source: &s };
        let v = compare(side, side, CompareOptions::default()).unwrap();
        assert_eq!(v.status, Status::Equivalent, "{v:?}");
        assert!(v.max_residual < 1e-10);
    }

    #[test]
    fn csv_layout() {
        let c = build_cloud(&sys("u1^2", [0.0, 1.0]), [2, 2, 2]).unwrap();
        let mut out = Vec::new();
        c.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.next().unwrap().split(',').count(), 17);
        let mut out = Vec::new();
        c.write_skipped_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("x,u,u1,reason\n"));
        assert!(text.contains(",f_zero"));
    }
}
