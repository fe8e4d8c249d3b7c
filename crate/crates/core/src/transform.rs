//! Feedback transformations `(x, u) -> (X(x), U(x, u))` and their action on
//! control systems.
//!
//! A map acts on the base coordinates by the prolongation
//! `Ψ(x, u, u1) = (X, U, U_x F + U_u u1)` and the transformed right-hand side
//! is fixed by `G(Ψ(p)) = X'(x) F(p)`. Because `Ψ` has no closed-form
//! inverse, jets of `G` are produced by inverting the Taylor series of `Ψ`
//! and composing it with the series of `X' F`.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{Binding, Expression, Var};
use crate::invariants::EPS_REG;
use crate::system::{Domain, JetSource};
use crate::taylor::{lift_variables, TaylorValue};

/// Largest accepted condition number of the Jacobian of `Ψ`.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackMap {
    name: String,
    x_map: Expression,
    u_map: Expression,
    dx: Expression,
    ux: Expression,
    uu: Expression,
    /// Box in `(x, u)`.
    domain: [[f64; 2]; 2],
}

impl FeedbackMap {
    pub fn new(name: impl Into<String>, x_map: Expression, u_map: Expression, domain: [[f64; 2]; 2]) -> Result<Self> {
        if x_map.variables().iter().any(|v| *v != Var::X) {
            return Err(Error::Invalid(format!("X may only depend on x: `{}`", x_map.source())));
        }
        if u_map.variables().contains(&Var::U1) {
            return Err(Error::Invalid(format!(
                "U may only depend on x and u: `{}`",
                u_map.source()
            )));
        }
        for r in domain {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(Error::Invalid(format!("bad map domain [{}, {}]", r[0], r[1])));
            }
        }
        Ok(Self {
            name: name.into(),
            dx: x_map.derivative(Var::X),
            ux: u_map.derivative(Var::X),
            uu: u_map.derivative(Var::U),
            x_map,
            u_map,
            domain,
        })
    }

    pub fn parse(name: impl Into<String>, x_map: &str, u_map: &str, domain: [[f64; 2]; 2]) -> Result<Self> {
        let x_map = Expression::parse(x_map, &[Var::X])?;
        let u_map = Expression::parse(u_map, &[Var::X, Var::U])?;
        Self::new(name, x_map, u_map, domain)
    }

    pub fn identity(domain: [[f64; 2]; 2]) -> Self {
        Self::parse("identity", "x", "u", domain).expect("identity map")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn x_map(&self) -> &Expression {
        &self.x_map
    }

    pub fn u_map(&self) -> &Expression {
        &self.u_map
    }

    pub fn domain(&self) -> [[f64; 2]; 2] {
        self.domain
    }

    pub fn with_domain(&self, domain: [[f64; 2]; 2]) -> Self {
        Self { domain, ..self.clone() }
    }

    /// `(X(x), U(x, u))`.
    pub fn eval(&self, x: f64, u: f64) -> Result<(f64, f64)> {
        let b = Binding::new().with(Var::X, x).with(Var::U, u);
        Ok((self.x_map.eval(&b)?, self.u_map.eval(&b)?))
    }

    /// `(X'(x), U_x(x, u), U_u(x, u))`.
    pub fn derivatives(&self, x: f64, u: f64) -> Result<[f64; 3]> {
        let b = Binding::new().with(Var::X, x).with(Var::U, u);
        Ok([self.dx.eval(&b)?, self.ux.eval(&b)?, self.uu.eval(&b)?])
    }

    /// The map `next ∘ self`, on the domain of `self`.
    pub fn then(&self, next: &FeedbackMap) -> Result<FeedbackMap> {
        let (x1, u1) = (self.x_map.ast().clone(), self.u_map.ast().clone());
        let subs = |v: Var| match v {
            Var::X => Some(x1.clone()),
            Var::U => Some(u1.clone()),
            Var::U1 => None,
        };
        let x_map = Expression::from_node(next.x_map.ast().substitute(&subs));
        let u_map = Expression::from_node(next.u_map.ast().substitute(&subs));
        FeedbackMap::new(format!("{}*{}", next.name, self.name), x_map, u_map, self.domain)
    }
}

/// `Ψ(p) = (X, U, U_x F + U_u u1)`.
pub fn pushforward_point(map: &FeedbackMap, system: &dyn JetSource, p: [f64; 3]) -> Result<[f64; 3]> {
    let f = system.series_at(p, 0)?.value();
    let (x, u) = map.eval(p[0], p[1])?;
    let [_, ux, uu] = map.derivatives(p[0], p[1])?;
    Ok([x, u, ux * f + uu * p[2]])
}

/// Taylor series of the three components of `Ψ` at `p`.
pub fn psi_series(map: &FeedbackMap, system: &dyn JetSource, p: [f64; 3], degree: usize) -> Result<[TaylorValue; 3]> {
    let vars = lift_variables(p, degree)?;
    let b = Binding::from_array(vars);
    let fs = system.series_at(p, degree)?;
    let ux = map.ux.eval(&b)?;
    let uu = map.uu.eval(&b)?;
    Ok([map.x_map.eval(&b)?, map.u_map.eval(&b)?, ux * fs + uu * vars[2]])
}

/// Jacobian `∂Ψ_k / ∂p_m` at `p`.
pub fn psi_jacobian(map: &FeedbackMap, system: &dyn JetSource, p: [f64; 3]) -> Result<[[f64; 3]; 3]> {
    let m = linear_part(&psi_series(map, system, p, 1)?);
    Ok([0, 1, 2].map(|k| [m[(k, 0)], m[(k, 1)], m[(k, 2)]]))
}

fn linear_part(series: &[TaylorValue; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|k, m| {
        let mut s = [0; 3];
        s[m] = 1;
        series[k].coeff(s)
    })
}

fn condition(m: &Matrix3<f64>) -> f64 {
    let sv = m.singular_values();
    let (max, min) = (sv.max(), sv.min());
    if min > 0.0 && min.is_finite() {
        max / min
    } else {
        f64::INFINITY
    }
}

fn checked_inverse(jac: &Matrix3<f64>, p: [f64; 3]) -> Result<Matrix3<f64>> {
    let cond = condition(jac);
    if cond > MAX_CONDITION {
        return Err(Error::SingularTransform(format!(
            "Jacobian condition {cond:e} at ({}, {}, {})",
            p[0], p[1], p[2]
        )));
    }
    jac.try_inverse()
        .ok_or_else(|| Error::SingularTransform(format!("singular Jacobian at ({}, {}, {})", p[0], p[1], p[2])))
}

/// Inverse of the series `psi` (based at `p`): series `h` at `psi(p)`
/// with `psi(h(q)) = q` through the series degree.
fn invert_series(psi: &[TaylorValue; 3], p: [f64; 3]) -> Result<[TaylorValue; 3]> {
    let degree = psi[0].degree();
    let q = psi.map(|s| s.value());
    let inv = checked_inverse(&linear_part(psi), p)?;
    let t = lift_variables(q, degree)?;
    let mut h = [0, 1, 2].map(|k| TaylorValue::constant(q, degree, p[k]).expect("valid degree"));
    // Each pass fixes one more degree of the inverse.
    for _ in 0..degree {
        let mut residual = [h[0]; 3];
        for k in 0..3 {
            residual[k] = psi[k].compose(&h)?.checked_sub(&t[k])?;
        }
        for k in 0..3 {
            let mut update = h[k];
            for m in 0..3 {
                update = update.checked_sub(&(residual[m] * inv[(k, m)]))?;
            }
            h[k] = update;
        }
        for (k, s) in h.iter_mut().enumerate() {
            *s = s.with_constant(p[k]);
        }
    }
    Ok(h)
}

/// Taylor series of the transformed right-hand side `G` at `Ψ(p)`.
pub fn transformed_series(
    map: &FeedbackMap,
    system: &dyn JetSource,
    p: [f64; 3],
    degree: usize,
) -> Result<TaylorValue> {
    let psi = psi_series(map, system, p, degree)?;
    let vars = lift_variables(p, degree)?;
    let rhs = map.dx.eval(&Binding::from_array(vars))? * system.series_at(p, degree)?;
    if degree == 0 {
        checked_inverse(&linear_part(&psi_series(map, system, p, 1)?), p)?;
        return TaylorValue::constant(psi.map(|s| s.value()), 0, rhs.value());
    }
    let h = invert_series(&psi, p)?;
    rhs.compose(&h)
}

/// Jet of `G` at `Ψ(p)` of the given order.
pub fn transformed_jet(
    map: &FeedbackMap,
    system: &dyn JetSource,
    p: [f64; 3],
    order: usize,
) -> Result<crate::invariants::Jet> {
    Ok(crate::invariants::Jet::from_series(transformed_series(
        map, system, p, order,
    )?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvertibilityReport {
    pub ok: bool,
    pub min_dx: f64,
    pub min_uu: f64,
    /// First sample `(x, u)` where `X'` or `U_u` vanishes or changes sign.
    pub violation: Option<[f64; 2]>,
    pub samples: usize,
}

/// Samples an `n × n` grid of the map domain plus `n` seeded random points.
pub fn invertibility_check(map: &FeedbackMap, n_samples: usize) -> Result<InvertibilityReport> {
    let [xr, ur] = map.domain;
    let n = n_samples.max(1);
    let axis = |r: [f64; 2], i: usize| {
        if n == 1 {
            0.5 * (r[0] + r[1])
        } else {
            r[0] + (r[1] - r[0]) * i as f64 / (n - 1) as f64
        }
    };
    let mut points: Vec<[f64; 2]> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| [axis(xr, i), axis(ur, j)])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut draw = |r: [f64; 2]| if r[1] > r[0] { rng.gen_range(r[0]..=r[1]) } else { r[0] };
    for _ in 0..n {
        points.push([draw(xr), draw(ur)]);
    }

    let mut report = InvertibilityReport {
        ok: true,
        min_dx: f64::INFINITY,
        min_uu: f64::INFINITY,
        violation: None,
        samples: points.len(),
    };
    let mut signs: Option<(bool, bool)> = None;
    for pt in points {
        let [dx, _, uu] = map.derivatives(pt[0], pt[1])?;
        report.min_dx = report.min_dx.min(dx.abs());
        report.min_uu = report.min_uu.min(uu.abs());
        let s = (dx > 0.0, uu > 0.0);
        let flipped = signs.is_some_and(|first| first != s);
        signs.get_or_insert(s);
        let vanishes = !(dx.abs() > EPS_REG && uu.abs() > EPS_REG);
        if (vanishes || flipped) && report.violation.is_none() {
            report.ok = false;
            report.violation = Some(pt);
        }
    }
    Ok(report)
}

fn poly_text(terms: &[(f64, &str)]) -> String {
    let mut out = String::new();
    for (i, (c, monomial)) in terms.iter().enumerate() {
        let body = if monomial.is_empty() {
            format!("{:?}", c.abs())
        } else {
            format!("{:?}*{monomial}", c.abs())
        };
        match (i, *c < 0.0) {
            (0, false) => out.push_str(&body),
            (0, true) => out.push_str(&format!("-{body}")),
            (_, false) => out.push_str(&format!(" + {body}")),
            (_, true) => out.push_str(&format!(" - {body}")),
        }
    }
    out
}

/// Seeded map `X = a + b x + c x²`, `U = d + e u + g x + h x u + m u²`
/// with `X' > 0` and `U_u > 0` on `domain`.
pub fn random_feedback(seed: u64, domain: [[f64; 2]; 2]) -> Result<FeedbackMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng.gen_range(-1.0..1.0);
    let b = rng.gen_range(0.5..2.0);
    let mut c = rng.gen_range(-0.3..0.3);
    let d = rng.gen_range(-1.0..1.0);
    let e = rng.gen_range(0.5..2.0);
    let g = rng.gen_range(-0.05..0.05);
    let mut h = rng.gen_range(-0.05..0.05);
    let mut m = rng.gen_range(-0.3..0.3);

    let [xr, ur] = domain;
    let corners = [[xr[0], ur[0]], [xr[0], ur[1]], [xr[1], ur[0]], [xr[1], ur[1]]];
    for _ in 0..64 {
        // X' and U_u are affine, so the corners bound them.
        let positive = corners
            .iter()
            .all(|&[x, u]| b + 2.0 * c * x > 0.25 * b && e + h * x + 2.0 * m * u > 0.25 * e);
        if positive {
            break;
        }
        c *= 0.5;
        h *= 0.5;
        m *= 0.5;
    }
    let x_text = poly_text(&[(a, ""), (b, "x"), (c, "x^2")]);
    let u_text = poly_text(&[(d, ""), (e, "u"), (g, "x"), (h, "x*u"), (m, "u^2")]);
    FeedbackMap::parse(format!("random({seed})"), &x_text, &u_text, domain)
}

/// The system `G` obtained by pushing a system forward along a feedback
/// map, exposed through its jets.
pub struct TransformedSystem {
    name: String,
    source: Arc<dyn JetSource>,
    map: FeedbackMap,
    domain: Domain,
    seeds: Vec<([f64; 3], [f64; 3])>,
    scale: [f64; 3],
}

impl TransformedSystem {
    /// Samples the source domain on an `n³` grid to bound the image and to
    /// seed preimage searches.
    pub fn new(source: Arc<dyn JetSource>, map: FeedbackMap, n: usize) -> Result<Self> {
        let mut seeds = Vec::new();
        let mut det_sign: Option<bool> = None;
        for p in source.domain().grid([n; 3]) {
            let psi = match psi_series(&map, source.as_ref(), p, 1) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let det = linear_part(&psi).determinant();
            if !det.is_finite() {
                continue;
            }
            if *det_sign.get_or_insert(det > 0.0) != (det > 0.0) || condition(&linear_part(&psi)) > MAX_CONDITION {
                return Err(Error::SingularTransform(format!(
                    "prolonged map degenerates near ({}, {}, {})",
                    p[0], p[1], p[2]
                )));
            }
            seeds.push((p, psi.map(|s| s.value())));
        }
        let domain = Domain::bounding(seeds.iter().map(|s| s.1))
            .ok_or_else(|| Error::SingularTransform("no source sample has a regular image".to_string()))?;
        let scale = domain.ranges().map(|r| (r[1] - r[0]).max(1e-12));
        Ok(Self {
            name: format!("{}({})", map.name(), source.name()),
            source,
            map,
            domain,
            seeds,
            scale,
        })
    }

    pub fn map(&self) -> &FeedbackMap {
        &self.map
    }

    pub fn source(&self) -> &Arc<dyn JetSource> {
        &self.source
    }

    fn scaled_distance(&self, a: [f64; 3], b: [f64; 3]) -> f64 {
        (0..3)
            .map(|k| ((a[k] - b[k]) / self.scale[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn newton(&self, q: [f64; 3], mut p: [f64; 3]) -> Option<[f64; 3]> {
        let residual = |p: [f64; 3]| -> Option<(Vector3<f64>, f64)> {
            let img = pushforward_point(&self.map, self.source.as_ref(), p).ok()?;
            let r = Vector3::from_fn(|k, _| img[k] - q[k]);
            let norm = (0..3).map(|k| (r[k] / self.scale[k]).abs()).fold(0.0, f64::max);
            norm.is_finite().then_some((r, norm))
        };
        let (mut r, mut norm) = residual(p)?;
        for _ in 0..50 {
            if norm < 1e-14 {
                break;
            }
            let jac = linear_part(&psi_series(&self.map, self.source.as_ref(), p, 1).ok()?);
            let step = jac.try_inverse()? * r;
            let mut t = 1.0;
            loop {
                let trial = [p[0] - t * step[0], p[1] - t * step[1], p[2] - t * step[2]];
                if let Some((rt, nt)) = residual(trial) {
                    if nt < norm {
                        p = trial;
                        r = rt;
                        norm = nt;
                        break;
                    }
                }
                t *= 0.5;
                if t < 1e-6 {
                    return (norm < 1e-11).then_some(p);
                }
            }
        }
        (norm < 1e-11).then_some(p)
    }

    /// Source point `p` with `Ψ(p) = q` inside the source domain.
    pub fn preimage(&self, q: [f64; 3]) -> Result<[f64; 3]> {
        let mut order: Vec<(f64, usize)> = self
            .seeds
            .iter()
            .enumerate()
            .map(|(i, s)| (self.scaled_distance(s.1, q), i))
            .collect();
        let k = order.len().min(4);
        if k == 0 {
            return Err(Error::OutsideImage(q[0], q[1], q[2]));
        }
        order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order[..k].sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let source_domain = self.source.domain();
        for &(_, i) in &order[..k] {
            if let Some(p) = self.newton(q, self.seeds[i].0) {
                if source_domain.contains_with_slack(p, 1e-9) {
                    return Ok(p);
                }
            }
        }
        Err(Error::OutsideImage(q[0], q[1], q[2]))
    }
}

impl JetSource for TransformedSystem {
    fn name(&self) -> &str {
        &self.name
    }

    fn domain(&self) -> Domain {
        self.domain
    }

    fn series_at(&self, q: [f64; 3], degree: usize) -> Result<TaylorValue> {
        let p = self.preimage(q)?;
        let g = transformed_series(&self.map, self.source.as_ref(), p, degree)?;
        TaylorValue::from_coeffs(q, degree, g.coeffs())
    }
}
