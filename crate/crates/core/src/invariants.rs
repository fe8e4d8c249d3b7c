//! Feedback differential invariants `J` (order 2) and `K` (order 3), the
//! invariant derivations `∇1, ∇2, ∇3`, their commutators, and the
//! 14-component signature vector.
//!
//! Every formula is written once, generically over [`Scalar`]: evaluated on
//! plain partial derivatives it gives the value of the invariant at a jet,
//! evaluated on the Taylor series of the partials of `F` it gives the
//! pullback of the invariant along the section `f = F(x, u, u1)`, whose
//! ordinary partial derivatives are the total derivatives of the invariant.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::system::JetSource;
use crate::taylor::{index_of, order, MultiIndex, Scalar, TaylorValue, DEFAULT_DEGREE, MAX_DEGREE};

/// Scaled magnitude at or below which a regularity flag fails.
pub const EPS_REG: f64 = 1e-8;

/// Relative tolerance for the structural zeros of the commutators.
pub const RELATION_TOL: f64 = 1e-6;

const F: MultiIndex = [0, 0, 0];
const FX: MultiIndex = [1, 0, 0];
const FU: MultiIndex = [0, 1, 0];
const F1: MultiIndex = [0, 0, 1];
const FXU: MultiIndex = [1, 1, 0];
const FUU: MultiIndex = [0, 2, 0];
const FX1: MultiIndex = [1, 0, 1];
const FU1: MultiIndex = [0, 1, 1];
const F11: MultiIndex = [0, 0, 2];
const F111: MultiIndex = [0, 0, 3];
const FU11: MultiIndex = [0, 1, 2];
const FX11: MultiIndex = [1, 0, 2];
const FUU1: MultiIndex = [0, 2, 1];
const FXU1: MultiIndex = [1, 1, 1];

/// The regularity condition that failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Flag {
    F,
    Fu1,
    Fu1u1,
    Denominator,
}

impl Flag {
    pub const ALL: [Flag; 4] = [Flag::F, Flag::Fu1, Flag::Fu1u1, Flag::Denominator];

    /// Short machine-friendly label.
    pub fn label(self) -> &'static str {
        match self {
            Flag::F => "f_zero",
            Flag::Fu1 => "fu1_zero",
            Flag::Fu1u1 => "fu1u1_zero",
            Flag::Denominator => "denominator_zero",
        }
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flag::F => "f = 0",
            Flag::Fu1 => "f_u1 = 0",
            Flag::Fu1u1 => "f_u1u1 = 0",
            Flag::Denominator => "u1 f_u1 - f = 0",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegularityFlags {
    pub f_nonzero: bool,
    pub fu1_nonzero: bool,
    pub fu1u1_nonzero: bool,
    pub denom_nonzero: bool,
    /// `|q| / max(1, |f|, |f_u1|)` for `q = f, f_u1, f_u1u1, u1 f_u1 - f`.
    pub magnitudes: [f64; 4],
}

impl RegularityFlags {
    pub fn is_regular(&self) -> bool {
        self.first_failure().is_none()
    }

    pub fn first_failure(&self) -> Option<Flag> {
        let ok = [self.f_nonzero, self.fu1_nonzero, self.fu1u1_nonzero, self.denom_nonzero];
        Flag::ALL.into_iter().zip(ok).find(|(_, ok)| !ok).map(|(f, _)| f)
    }

    pub fn require(&self) -> Result<()> {
        match self.first_failure() {
            Some(flag) => Err(Error::NonRegular(flag)),
            None => Ok(()),
        }
    }
}

/// Partial derivatives `f_σ` of a system at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    series: TaylorValue,
}

impl Jet {
    pub fn from_series(series: TaylorValue) -> Self {
        Self { series }
    }

    pub fn point(&self) -> [f64; 3] {
        self.series.base()
    }

    pub fn order(&self) -> usize {
        self.series.degree()
    }

    pub fn partial(&self, sigma: MultiIndex) -> Result<f64> {
        self.series.partial(sigma)
    }

    pub fn series(&self) -> &TaylorValue {
        &self.series
    }

    fn require_order(&self, needed: usize) -> Result<()> {
        if self.order() < needed {
            Err(Error::OrderExceeded {
                order: needed,
                degree: self.order(),
            })
        } else {
            Ok(())
        }
    }

    fn d(&self, sigma: MultiIndex) -> f64 {
        self.series.partial(sigma).unwrap_or(f64::NAN)
    }
}

pub fn system_jet(system: &dyn JetSource, p: [f64; 3], order: usize) -> Result<Jet> {
    Ok(Jet::from_series(system.series_at(p, order)?))
}

pub fn regularity(jet: &Jet) -> Result<RegularityFlags> {
    regularity_with(jet, EPS_REG)
}

pub fn regularity_with(jet: &Jet, eps: f64) -> Result<RegularityFlags> {
    jet.require_order(2)?;
    let u1 = jet.point()[2];
    let (f, f1, f11) = (jet.d(F), jet.d(F1), jet.d(F11));
    let scale = 1f64.max(f.abs()).max(f1.abs());
    let magnitudes = [f, f1, f11, u1 * f1 - f].map(|q| q.abs() / scale);
    let ok = magnitudes.map(|m| m > eps);
    Ok(RegularityFlags {
        f_nonzero: ok[0],
        fu1_nonzero: ok[1],
        fu1u1_nonzero: ok[2],
        denom_nonzero: ok[3],
        magnitudes,
    })
}

/// `J = f² f_u1u1 / ((u1 f_u1 - f) f_u1²)`
fn j_formula<S: Scalar>(u1: S, d: &impl Fn(MultiIndex) -> S) -> S {
    let (f, f1, f11) = (d(F), d(F1), d(F11));
    f * f * f11 / ((u1 * f1 - f) * f1 * f1)
}

/// Third-order invariant `K`.
fn k_formula<S: Scalar>(z: S, d: &impl Fn(MultiIndex) -> S) -> S {
    let (f, fx, fu, f1) = (d(F), d(FX), d(FU), d(F1));
    let (fxu, fuu, fx1, fu1, f11) = (d(FXU), d(FUU), d(FX1), d(FU1), d(F11));
    let (f111, fu11, fx11, fuu1, fxu1) = (d(F111), d(FU11), d(FX11), d(FUU1), d(FXU1));
    let z2 = z * z;

    let c1 = -(f * fu * fx1 * f111) - z * fu * fu1 * f111 + fu * fu * f111;
    let c2 = z * (fu * f1 * fu11 - fu * fu * f111 - fx * fu * f1 * f111 + fx * f1 * f1 * fu11)
        + z2 * fu1 * (-(f1 * fu11) + fu * f111);
    let c3 = f * fx1 * fu11 + fx * fu * f111 - fu * fu11 - fx * f1 * fu11
        + z * (fu * fx1 * f111 - f1 * fx1 * fu11 + fu1 * fu11);
    let c4 = -(z * (f1 * fx * fu1 * 2.0 - f1 * fu * fx1 + fu * fu1 + f1 * fuu + f1 * f1 * fxu))
        + z2 * (f1 * fuu1 - fu * fu11 + fu1 * fu1);
    let c5 = f * fu * fx11 - f * fx1 * fu1 + fu * fu1 + z * (fu * fu11 - fu1 * fu1);
    let c6 = fuu - fu * fx1 + fx * fu1 * 2.0 + f1 * fxu - f * fxu1 + z * (f1 * fxu1 - fuu1 + fx1 * fu1 - fu * fx11);

    let f11sq = f11 * f11;
    -(z * fxu) + z * fu * fu / (f * f1) * 2.0 - fu * fu / (f1 * f1) * 2.0 + (fuu * z - fu * fx * 2.0 + f * fxu) / f1
        - z * (fuu * z - fu * fx * 2.0) / f
        + c1 / (f1 * f11sq)
        + c2 / (f * f11sq)
        + c3 / f11sq
        + c4 / (f * f11)
        + c5 / (f1 * f11)
        + c6 / f11
}

/// Coefficients `(A, B, C)` of `∇_i = A d/dx + B d/du + C d/du1`.
fn nabla_formula<S: Scalar>(i: usize, u1: S, d: &impl Fn(MultiIndex) -> S) -> [S; 3] {
    let (f, fx, fu, f1) = (d(F), d(FX), d(FU), d(F1));
    let zero = f.constant_like(0.0);
    match i {
        1 => [zero, (u1 * f1 - f) / f1, (f - u1 * f1) / (f1 * f1) * fu],
        2 => [zero, zero, f / f1],
        3 => {
            let (fu1, fx1, f11) = (d(FU1), d(FX1), d(F11));
            [
                f,
                f / f1,
                (fx * f1 + fu - u1 * fu1 - f * fx1) / f11 + (u1 * f1 - f) / (f1 * f1) * fu,
            ]
        }
        _ => panic!("invariant derivation index must be 1, 2 or 3, got {i}"),
    }
}

fn check_nabla_index(i: usize) -> Result<()> {
    if (1..=3).contains(&i) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("derivation index {i} not in 1..=3")))
    }
}

pub fn eval_j(jet: &Jet) -> Result<f64> {
    regularity(jet)?.require()?;
    Ok(j_formula(jet.point()[2], &|s| jet.d(s)))
}

pub fn eval_k(jet: &Jet) -> Result<f64> {
    jet.require_order(3)?;
    regularity(jet)?.require()?;
    Ok(k_formula(jet.point()[2], &|s| jet.d(s)))
}

/// Derivatives `∂^σF`, `|σ| <= 3`, of a local series, all truncated to
/// one degree.
struct Section {
    u1: TaylorValue,
    parts: [Option<TaylorValue>; 20],
}

impl Section {
    fn new(fs: &TaylorValue, degree: usize) -> Result<Self> {
        if fs.degree() < degree {
            return Err(Error::OrderExceeded {
                order: degree,
                degree: fs.degree(),
            });
        }
        let mut parts = [None; 20];
        for &sigma in crate::taylor::multi_indices(3) {
            if fs.degree() >= order(sigma) + degree {
                parts[index_of(sigma)] = Some(fs.derivative_multi(sigma)?.truncate(degree)?);
            }
        }
        let u1 = TaylorValue::variable(fs.base(), degree, 2)?;
        Ok(Self { u1, parts })
    }

    fn d(&self, sigma: MultiIndex) -> TaylorValue {
        self.parts[index_of(sigma)].expect("series order checked by caller")
    }
}

fn require_series_degree(fs: &TaylorValue, needed: usize) -> Result<()> {
    if fs.degree() < needed {
        Err(Error::OrderExceeded {
            order: needed,
            degree: fs.degree(),
        })
    } else {
        Ok(())
    }
}

fn series_regularity(fs: &TaylorValue) -> Result<RegularityFlags> {
    let flags = regularity(&Jet::from_series(fs.truncate(fs.degree().min(2))?))?;
    flags.require()?;
    Ok(flags)
}

/// Invariant derivation as a vector field, with coefficient series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivationField {
    pub index: usize,
    pub components: [TaylorValue; 3],
}

impl DerivationField {
    /// Constant terms `(A, B, C)` at the base point.
    pub fn values(&self) -> [f64; 3] {
        self.components.map(|c| c.value())
    }

    /// `A ∂x g + B ∂u g + C ∂u1 g`, a series of degree `g.degree() - 1`.
    pub fn apply(&self, g: &TaylorValue) -> Result<TaylorValue> {
        apply_series(&self.components, g)
    }
}

fn apply_series(v: &[TaylorValue; 3], g: &TaylorValue) -> Result<TaylorValue> {
    if g.degree() == 0 {
        return Err(Error::OrderExceeded { order: 1, degree: 0 });
    }
    let d = g.degree() - 1;
    let mut acc = g.derivative(0)?.constant_like(0.0);
    for (var, coeff) in v.iter().enumerate() {
        acc = acc.checked_add(&coeff.truncate(d)?.checked_mul(&g.derivative(var)?)?)?;
    }
    Ok(acc)
}

/// Commutator `[v, w]` of coefficient fields, one degree lower.
fn bracket_series(v: &[TaylorValue; 3], w: &[TaylorValue; 3]) -> Result<[TaylorValue; 3]> {
    let mut out = [v[0]; 3];
    for k in 0..3 {
        out[k] = apply_series(v, &w[k])?.checked_sub(&apply_series(w, &v[k])?)?;
    }
    Ok(out)
}

fn fields_at(fs: &TaylorValue, degree: usize) -> Result<[[TaylorValue; 3]; 3]> {
    let s = Section::new(fs, degree)?;
    let d = |sigma| s.d(sigma);
    Ok([1, 2, 3].map(|i| nabla_formula(i, s.u1, &d)))
}

/// `∇_i` at `fs.base()` with coefficient series of degree `fs.degree() - 2`.
pub fn nabla_from_series(i: usize, fs: &TaylorValue) -> Result<DerivationField> {
    check_nabla_index(i)?;
    require_series_degree(fs, 2)?;
    series_regularity(fs)?;
    let s = Section::new(fs, fs.degree() - 2)?;
    Ok(DerivationField {
        index: i,
        components: nabla_formula(i, s.u1, &|sigma| s.d(sigma)),
    })
}

pub fn nabla(i: usize, system: &dyn JetSource, p: [f64; 3], degree: usize) -> Result<DerivationField> {
    nabla_from_series(i, &system.series_at(p, degree + 2)?)
}

/// The two basic invariants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Invariant {
    J,
    K,
}

impl Invariant {
    pub fn order(self) -> usize {
        match self {
            Invariant::J => 2,
            Invariant::K => 3,
        }
    }
}

/// Pullback of `J` or `K` along the section of `fs`, as a series of degree
/// `fs.degree() - order`.
pub fn pullback_from_series(field: Invariant, fs: &TaylorValue) -> Result<TaylorValue> {
    require_series_degree(fs, field.order())?;
    series_regularity(fs)?;
    let s = Section::new(fs, fs.degree() - field.order())?;
    let d = |sigma| s.d(sigma);
    Ok(match field {
        Invariant::J => j_formula(s.u1, &d),
        Invariant::K => k_formula(s.u1, &d),
    })
}

pub fn pullback(field: Invariant, system: &dyn JetSource, p: [f64; 3], degree: usize) -> Result<TaylorValue> {
    pullback_from_series(field, &system.series_at(p, degree + field.order())?)
}

/// Value of `∇_i(g)` at the base point, for a pulled-back scalar `g`.
pub fn apply_nabla(i: usize, g: &TaylorValue, system: &dyn JetSource, p: [f64; 3]) -> Result<f64> {
    if g.base() != p {
        return Err(Error::SeriesMismatch("scalar field and point differ"));
    }
    let field = nabla(i, system, p, 0)?;
    let grad = [g.partial([1, 0, 0])?, g.partial([0, 1, 0])?, g.partial([0, 0, 1])?];
    Ok(field.values().iter().zip(grad).map(|(a, b)| a * b).sum())
}

pub fn bracket_from_series(i: usize, j: usize, fs: &TaylorValue) -> Result<[f64; 3]> {
    check_nabla_index(i)?;
    check_nabla_index(j)?;
    require_series_degree(fs, 3)?;
    series_regularity(fs)?;
    let fields = fields_at(fs, 1)?;
    Ok(bracket_series(&fields[i - 1], &fields[j - 1])?.map(|c| c.value()))
}

/// Commutator `[∇_i, ∇_j]` at `p`.
pub fn bracket(i: usize, j: usize, system: &dyn JetSource, p: [f64; 3]) -> Result<[f64; 3]> {
    bracket_from_series(i, j, &system.series_at(p, DEFAULT_DEGREE)?)
}

/// Invariants read off the commutation relations
/// `[∇2,∇1] = J ∇1`, `[∇3,∇1] = K ∇2`, `[∇3,∇2] = -∇3 + J ∇1 + L ∇2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BracketScalars {
    pub j: f64,
    pub k: f64,
    pub l: f64,
}

/// Fields, brackets and relation residuals at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationCheck {
    pub fields: [[f64; 3]; 3],
    pub b21: [f64; 3],
    pub b31: [f64; 3],
    pub b32: [f64; 3],
    pub scalars: BracketScalars,
    /// `J` from its formula.
    pub j: f64,
    /// Componentwise residuals of the three relations.
    pub residuals: [[f64; 3]; 3],
    pub scale: f64,
}

impl RelationCheck {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().flatten().fold(0.0, |m, r| m.max(r.abs()))
    }
}

pub fn relation_check_from_series(fs: &TaylorValue) -> Result<RelationCheck> {
    require_series_degree(fs, 3)?;
    series_regularity(fs)?;
    let hi = fields_at(fs, 1)?;
    let b21 = bracket_series(&hi[1], &hi[0])?.map(|c| c.value());
    let b31 = bracket_series(&hi[2], &hi[0])?.map(|c| c.value());
    let b32 = bracket_series(&hi[2], &hi[1])?.map(|c| c.value());
    let v = hi.map(|f| f.map(|c| c.value()));
    let j = eval_j(&Jet::from_series(fs.truncate(2)?))?;

    let (b1, c1, c2, c3) = (v[0][1], v[0][2], v[1][2], v[2][2]);
    let j_br = b21[1] / b1;
    let k_br = b31[2] / c2;
    let l_br = (b32[2] + c3 - j * c1) / c2;

    let mut residuals = [[0.0; 3]; 3];
    for m in 0..3 {
        residuals[0][m] = b21[m] - j * v[0][m];
        residuals[1][m] = b31[m] - k_br * v[1][m];
        residuals[2][m] = b32[m] - (-v[2][m] + j * v[0][m] + l_br * v[1][m]);
    }
    let scale = [v.as_flattened(), &b21, &b31, &b32]
        .concat()
        .iter()
        .fold(1f64, |m, c| m.max(c.abs()));
    Ok(RelationCheck {
        fields: v,
        b21,
        b31,
        b32,
        scalars: BracketScalars {
            j: j_br,
            k: k_br,
            l: l_br,
        },
        j,
        residuals,
        scale,
    })
}

pub fn bracket_scalars_from_series(fs: &TaylorValue) -> Result<BracketScalars> {
    let rc = relation_check_from_series(fs)?;
    let tol = RELATION_TOL * rc.scale;
    let structural = [
        ("[∇2,∇1] x-component", rc.b21[0]),
        ("[∇2,∇1] u1-component", rc.b21[2] - rc.scalars.j * rc.fields[0][2]),
        ("[∇3,∇1] x-component", rc.b31[0]),
        ("[∇3,∇1] u-component", rc.b31[1]),
    ];
    for (relation, residual) in structural {
        if residual.abs() > tol {
            return Err(Error::RelationViolation {
                relation,
                residual,
                scale: rc.scale,
            });
        }
    }
    Ok(rc.scalars)
}

pub fn bracket_scalars(system: &dyn JetSource, p: [f64; 3]) -> Result<BracketScalars> {
    bracket_scalars_from_series(&system.series_at(p, DEFAULT_DEGREE)?)
}

/// How `K` enters the signature: through its explicit formula or as the
/// coefficient read off `[∇3, ∇1] = K ∇2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum KRoute {
    #[default]
    Formula,
    Bracket,
}

pub const SIGNATURE_NAMES: [&str; 14] = [
    "j", "j1", "j2", "j3", "j11", "j12", "j13", "j22", "j23", "j33", "k", "k1", "k2", "k3",
];

/// `(i, j)` slots of the second derivatives `∇_i ∇_j J`, `i <= j`.
pub const SECOND_ORDER_SLOTS: [(usize, usize); 6] = [(1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3)];

/// Series degree of `F` needed for a signature of output degree `d`.
pub const fn signature_input_degree(d: usize) -> usize {
    d + 4
}

/// All invariants of a system along its section near one base point,
/// as series of output degree `d` (or higher where intermediate).
#[derive(Debug, Clone)]
pub struct LocalInvariants {
    pub flags: RegularityFlags,
    /// Output degree.
    pub degree: usize,
    /// Pullback of `J`, degree `d + 2`.
    pub j: TaylorValue,
    /// Coefficients of `∇1, ∇2, ∇3`, degree `d + 1`.
    pub fields: [[TaylorValue; 3]; 3],
    /// `∇_i(J)`, degree `d + 1`.
    pub dj: [TaylorValue; 3],
    /// Pullback of `K`, degree `d + 1`.
    pub k: TaylorValue,
}

impl LocalInvariants {
    /// Needs `fs.degree() >= d + 4`.
    pub fn compute(fs: &TaylorValue, d: usize, route: KRoute) -> Result<Self> {
        let needed = signature_input_degree(d);
        if needed > MAX_DEGREE {
            return Err(Error::DegreeTooLarge(needed));
        }
        require_series_degree(fs, needed)?;
        let fs = fs.truncate(needed)?;
        let flags = series_regularity(&fs)?;

        let j = pullback_from_series(Invariant::J, &fs)?;
        let fields = fields_at(&fs, d + 1)?;
        let mut dj = [j; 3];
        for i in 0..3 {
            dj[i] = apply_series(&fields[i], &j)?;
        }
        let k = match route {
            KRoute::Formula => pullback_from_series(Invariant::K, &fs)?.truncate(d + 1)?,
            KRoute::Bracket => {
                let hi = fields_at(&fs, d + 2)?;
                let b31 = bracket_series(&hi[2], &hi[0])?;
                b31[2].checked_div(hi[1][2].truncate(d + 1)?)?
            }
        };
        Ok(Self {
            flags,
            degree: d,
            j,
            fields,
            dj,
            k,
        })
    }

    /// `∇_i ∇_j J` for `i, j` in `1..=3`, degree `d`.
    pub fn second(&self, i: usize, j: usize) -> Result<TaylorValue> {
        apply_series(&self.fields[i - 1], &self.dj[j - 1])
    }

    /// `∇_i K`, degree `d`.
    pub fn dk(&self, i: usize) -> Result<TaylorValue> {
        apply_series(&self.fields[i - 1], &self.k)
    }

    /// The 14 signature components as series of degree `d`, in
    /// [`SIGNATURE_NAMES`] order.
    pub fn signature_series(&self) -> Result<[TaylorValue; 14]> {
        let d = self.degree;
        let mut out = Vec::with_capacity(14);
        out.push(self.j.truncate(d)?);
        for i in 0..3 {
            out.push(self.dj[i].truncate(d)?);
        }
        for (i, j) in SECOND_ORDER_SLOTS {
            out.push(self.second(i, j)?);
        }
        out.push(self.k.truncate(d)?);
        for i in 1..=3 {
            out.push(self.dk(i)?);
        }
        Ok(out.try_into().expect("14 components"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignatureVector {
    pub j: f64,
    pub j1: f64,
    pub j2: f64,
    pub j3: f64,
    pub j11: f64,
    pub j12: f64,
    pub j13: f64,
    pub j22: f64,
    pub j23: f64,
    pub j33: f64,
    pub k: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub flags: RegularityFlags,
}

impl SignatureVector {
    pub fn from_array(v: [f64; 14], flags: RegularityFlags) -> Self {
        let [j, j1, j2, j3, j11, j12, j13, j22, j23, j33, k, k1, k2, k3] = v;
        Self {
            j,
            j1,
            j2,
            j3,
            j11,
            j12,
            j13,
            j22,
            j23,
            j33,
            k,
            k1,
            k2,
            k3,
            flags,
        }
    }

    pub fn to_array(&self) -> [f64; 14] {
        [
            self.j, self.j1, self.j2, self.j3, self.j11, self.j12, self.j13, self.j22, self.j23, self.j33, self.k,
            self.k1, self.k2, self.k3,
        ]
    }
}

pub fn signature_from_series(fs: &TaylorValue, route: KRoute) -> Result<SignatureVector> {
    let local = LocalInvariants::compute(fs, 0, route)?;
    let values = local.signature_series()?.map(|s| s.value());
    Ok(SignatureVector::from_array(values, local.flags))
}

/// Signature values and their partial derivatives in `(x, u, u1)`.
pub fn signature_with_jacobian(fs: &TaylorValue, route: KRoute) -> Result<(SignatureVector, [[f64; 3]; 14])> {
    let local = LocalInvariants::compute(fs, 1, route)?;
    let series = local.signature_series()?;
    let values = series.map(|s| s.value());
    let jac = series.map(|s| [s.coeff([1, 0, 0]), s.coeff([0, 1, 0]), s.coeff([0, 0, 1])]);
    Ok((SignatureVector::from_array(values, local.flags), jac))
}

pub fn signature_vector(system: &dyn JetSource, p: [f64; 3]) -> Result<SignatureVector> {
    signature_from_series(&system.series_at(p, DEFAULT_DEGREE)?, KRoute::Formula)
}

/// `K` from its formula and from the bracket at one point.
pub fn k_cross_check(fs: &TaylorValue) -> Result<(f64, f64)> {
    let formula = eval_k(&Jet::from_series(fs.truncate(3)?))?;
    let rc = relation_check_from_series(fs)?;
    Ok((formula, rc.scalars.k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{Domain, SystemDef};
    use approx::assert_abs_diff_eq;

    fn sys(f: &str) -> SystemDef {
        let d = Domain::new([-1.0, 1.0], [-1.0, 1.0], [1.0, 2.0]).unwrap();
        SystemDef::parse(f, f, d).unwrap()
    }

    fn jet(f: &str, p: [f64; 3], order: usize) -> Jet {
        system_jet(&sys(f), p, order).unwrap()
    }

    #[test]
    fn system_jet_examples() {
        let j = jet("u1^2", [0.0, 0.0, 1.0], 2);
        assert_eq!(j.partial(F).unwrap(), 1.0);
        assert_eq!(j.partial(F1).unwrap(), 2.0);
        assert_eq!(j.partial(F11).unwrap(), 2.0);
        for s in [FX, FU, FXU, FUU, FX1, FU1, [2, 0, 0]] {
            assert_eq!(j.partial(s).unwrap(), 0.0);
        }

        let j = jet("exp(u1)", [0.0, 0.0, 0.0], 3);
        for s in [F, F1, F11, F111] {
            assert_abs_diff_eq!(j.partial(s).unwrap(), 1.0, epsilon = 1e-15);
        }
        assert_eq!(j.partial(FU11).unwrap(), 0.0);

        let j = jet("x*u", [1.0, 2.0, 0.0], 1);
        assert_eq!([F, FX, FU, F1].map(|s| j.partial(s).unwrap()), [2.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn regularity_examples() {
        let r = regularity(&jet("u1^2", [0.0, 0.0, 1.0], 2)).unwrap();
        assert!(r.f_nonzero && r.fu1_nonzero && r.fu1u1_nonzero && r.denom_nonzero);

        let r = regularity(&jet("u1", [0.3, 0.1, 0.7], 2)).unwrap();
        assert!(!r.fu1u1_nonzero);
        assert_eq!(r.first_failure(), Some(Flag::Fu1u1));

        let r = regularity(&jet("u*u1", [0.0, 1.0, 1.0], 2)).unwrap();
        assert!(!r.denom_nonzero);
        assert!(!r.fu1u1_nonzero);

        assert!(regularity(&jet("u1^2", [0.0, 0.0, 1.0], 1)).is_err());
    }

    #[test]
    fn eval_j_examples() {
        assert_eq!(eval_j(&jet("u1^2", [0.0, 0.0, 1.0], 2)).unwrap(), 0.5);
        assert_abs_diff_eq!(
            eval_j(&jet("exp(u1)", [0.0, 0.0, 0.0], 2)).unwrap(),
            -1.0,
            epsilon = 1e-15
        );
        assert_eq!(eval_j(&jet("2*u1^2", [0.0, 0.0, 1.0], 2)).unwrap(), 0.5);
        assert_eq!(
            eval_j(&jet("u1", [0.0, 0.0, 1.0], 2)).unwrap_err(),
            Error::NonRegular(Flag::Fu1u1)
        );
        assert_eq!(
            eval_j(&jet("u1^2", [0.0, 0.0, 0.0], 2)).unwrap_err(),
            Error::NonRegular(Flag::F)
        );
    }

    #[test]
    fn eval_k_examples() {
        assert_eq!(eval_k(&jet("u1^2", [0.3, -0.2, 1.4], 3)).unwrap(), 0.0);
        assert_abs_diff_eq!(
            eval_k(&jet("exp(u1)", [0.0, 0.0, 0.0], 3)).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        let s = sys("u1^2+u");
        let fs = s.series_at([0.0, 0.0, 1.0], 4).unwrap();
        let (formula, bracket) = k_cross_check(&fs).unwrap();
        assert_abs_diff_eq!(formula, bracket, epsilon = 1e-9 * (1.0 + bracket.abs()));
        assert!(eval_k(&jet("u1^2", [0.0, 0.0, 1.0], 2)).is_err());
    }

    #[test]
    fn nabla_examples() {
        let s = sys("u1^2");
        let p = [0.0, 0.0, 1.0];
        assert_eq!(nabla(1, &s, p, 0).unwrap().values(), [0.0, 0.5, 0.0]);
        assert_eq!(nabla(2, &s, p, 0).unwrap().values(), [0.0, 0.0, 0.5]);
        assert_eq!(nabla(3, &s, p, 0).unwrap().values(), [1.0, 0.5, 0.0]);
        assert!(nabla(4, &s, p, 0).is_err());
        assert_eq!(nabla(1, &sys("u1"), p, 0).unwrap_err(), Error::NonRegular(Flag::Fu1u1));
    }

    #[test]
    fn pullback_examples() {
        let j = pullback(Invariant::J, &sys("u1^2"), [0.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(j.degree(), 2);
        assert_abs_diff_eq!(j.value(), 0.5, epsilon = 1e-15);
        assert!(j.coeffs()[1..].iter().all(|c| c.abs() < 1e-12));

        // J = 1/(u1 - 1) for exp(u1)
        let j = pullback(Invariant::J, &sys("exp(u1)"), [0.0, 0.0, 0.0], 1).unwrap();
        assert_abs_diff_eq!(j.value(), -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(j.partial([0, 0, 1]).unwrap(), -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(j.partial([1, 0, 0]).unwrap(), 0.0, epsilon = 1e-14);

        let k = pullback(Invariant::K, &sys("u1^2"), [0.0, 0.0, 1.0], 1).unwrap();
        assert!(k.coeffs().iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn apply_nabla_examples() {
        let s = sys("u1^2");
        let p = [0.0, 0.0, 1.0];
        let j = pullback(Invariant::J, &s, p, 1).unwrap();
        assert_abs_diff_eq!(apply_nabla(2, &j, &s, p).unwrap(), 0.0, epsilon = 1e-12);

        let s = sys("exp(u1)");
        let p = [0.0, 0.0, 0.0];
        let j = pullback(Invariant::J, &s, p, 1).unwrap();
        assert_abs_diff_eq!(apply_nabla(1, &j, &s, p).unwrap(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(apply_nabla(3, &j, &s, p).unwrap(), 0.0, epsilon = 1e-14);
        // ∇2 J = (f / f_u1) ∂u1 J = -1 at u1 = 0
        assert_abs_diff_eq!(apply_nabla(2, &j, &s, p).unwrap(), -1.0, epsilon = 1e-14);
    }

    #[test]
    fn bracket_examples() {
        let s = sys("u1^2");
        let p = [0.0, 0.0, 1.0];
        let b = bracket(2, 1, &s, p).unwrap();
        assert_abs_diff_eq!(b[1], 0.25, epsilon = 1e-15);
        assert_eq!([b[0], b[2]], [0.0, 0.0]);
        let b = bracket(3, 1, &s, p).unwrap();
        assert!(b.iter().all(|c| c.abs() < 1e-15));
        let b = bracket(3, 2, &s, p).unwrap();
        assert_abs_diff_eq!(b[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b[1], -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(b[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn bracket_scalar_examples() {
        let p = [0.0, 0.0, 1.0];
        let bs = bracket_scalars(&sys("u1^2"), p).unwrap();
        assert_abs_diff_eq!(bs.j, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(bs.k, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(bs.l, 0.0, epsilon = 1e-15);
        let bs = bracket_scalars(&sys("2*u1^2"), p).unwrap();
        assert_abs_diff_eq!(bs.j, 0.5, epsilon = 1e-15);
        assert_eq!(
            bracket_scalars(&sys("u1"), p).unwrap_err(),
            Error::NonRegular(Flag::Fu1u1)
        );
    }

    #[test]
    fn signature_examples() {
        let p = [0.0, 0.0, 1.0];
        let expect = {
            let mut v = [0.0; 14];
            v[0] = 0.5;
            v
        };
        for f in ["u1^2", "2*u1^2"] {
            let sv = signature_vector(&sys(f), p).unwrap().to_array();
            for (a, b) in sv.iter().zip(expect) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
            }
        }
        let sv = signature_vector(&sys("exp(u1)"), [0.0, 0.0, 2.0]).unwrap();
        assert_abs_diff_eq!(sv.j, 1.0, epsilon = 1e-13);
        assert_abs_diff_eq!(sv.k, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sv.j2, -1.0, epsilon = 1e-13);
        // ∇2∇2 J = ∂u1(-(u1-1)^-2) = 2 at u1 = 2
        assert_abs_diff_eq!(sv.j22, 2.0, epsilon = 1e-12);
        assert_eq!(
            signature_vector(&sys("u1"), p).unwrap_err(),
            Error::NonRegular(Flag::Fu1u1)
        );
    }

    #[test]
    fn k_routes_agree() {
        let s = sys("u1^3/3 + x*u1 + u^2 + 2");
        let fs = s.series_at([0.4, 0.3, 2.5], 4).unwrap();
        let a = signature_from_series(&fs, KRoute::Formula).unwrap().to_array();
        let b = signature_from_series(&fs, KRoute::Bracket).unwrap().to_array();
        for (x, y) in a.iter().zip(b) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn jacobian_matches_values_elsewhere() {
        let s = sys("u1^3/3 + x*u1 + u^2 + 2");
        let p = [0.4, 0.3, 2.5];
        let (sv, jac) = signature_with_jacobian(&s.series_at(p, 5).unwrap(), KRoute::Formula).unwrap();
        let base = signature_vector(&s, p).unwrap().to_array();
        for (a, b) in sv.to_array().iter().zip(base) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-10 * (1.0 + b.abs()));
        }
        let h = 1e-5;
        for var in 0..3 {
            let mut lo = p;
            let mut hi = p;
            lo[var] -= h;
            hi[var] += h;
            let a = signature_vector(&s, lo).unwrap().to_array();
            let b = signature_vector(&s, hi).unwrap().to_array();
            for c in 0..14 {
                let fd = (b[c] - a[c]) / (2.0 * h);
                assert_abs_diff_eq!(jac[c][var], fd, epsilon = 1e-5 * (1.0 + fd.abs()));
            }
        }
    }
}
