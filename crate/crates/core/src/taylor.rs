//! Truncated Taylor series in the three base variables `(x, u, u1)`.
//!
//! A [`TaylorValue`] stores the coefficients `c_σ` of
//! `Σ c_σ (x - x0)^i (u - u0)^j (u1 - u10)^l` for all multi-indices
//! `σ = (i, j, l)` with `|σ| <= degree`. Storage is a dense, fixed-size
//! array over the simplex of multi-indices in graded order, so a series of
//! degree `d` occupies the first [`term_count`]`(d)` slots and lowering the
//! degree is a plain truncation.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Highest supported truncation degree.
pub const MAX_DEGREE: usize = 5;
/// Number of multi-indices with `|σ| <= MAX_DEGREE`.
pub const MAX_TERMS: usize = 56;
/// Default degree used throughout the invariant pipeline.
pub const DEFAULT_DEGREE: usize = 4;

/// Divisors whose constant term is at most this in magnitude are rejected.
pub const SINGULAR_THRESHOLD: f64 = 1e-300;

/// Exponents `(i, j, l)` of `(x, u, u1)`.
pub type MultiIndex = [usize; 3];

/// Number of multi-indices `σ` in three variables with `|σ| <= degree`.
pub const fn term_count(degree: usize) -> usize {
    (degree + 1) * (degree + 2) * (degree + 3) / 6
}

/// Position of `σ` in the graded ordering: by total degree, then by
/// descending `x` exponent, then by descending `u` exponent.
pub fn index_of(sigma: MultiIndex) -> usize {
    let [i, j, _] = sigma;
    let n = order(sigma);
    n * (n + 1) * (n + 2) / 6 + (n - i) * (n - i + 1) / 2 + (n - i - j)
}

/// Total order `|σ|`.
pub fn order(sigma: MultiIndex) -> usize {
    sigma[0] + sigma[1] + sigma[2]
}

/// All multi-indices with `|σ| <= degree`, in graded order.
pub fn multi_indices(degree: usize) -> &'static [MultiIndex] {
    &tables().indices[..term_count(degree.min(MAX_DEGREE))]
}

/// `σ! = i! j! l!`
pub fn multi_factorial(sigma: MultiIndex) -> f64 {
    sigma.iter().map(|&k| factorial(k)).product()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

struct Tables {
    indices: Vec<MultiIndex>,
    /// `(a, b, a + b)` index triples sorted by the order of `a + b`.
    pairs: Vec<(u8, u8, u8)>,
    /// Number of pairs whose sum has order `<= d`, for each `d`.
    pair_prefix: [usize; MAX_DEGREE + 1],
}

fn tables() -> &'static Tables {
    static TABLES: OnceLock<Tables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let mut indices = Vec::with_capacity(MAX_TERMS);
        for n in 0..=MAX_DEGREE {
            for i in (0..=n).rev() {
                for j in (0..=n - i).rev() {
                    indices.push([i, j, n - i - j]);
                }
            }
        }
        debug_assert!(indices.iter().enumerate().all(|(k, &s)| index_of(s) == k));

        let mut pairs = Vec::new();
        for (ia, a) in indices.iter().enumerate() {
            for (ib, b) in indices.iter().enumerate() {
                let s = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
                if order(s) <= MAX_DEGREE {
                    pairs.push((ia as u8, ib as u8, index_of(s) as u8));
                }
            }
        }
        pairs.sort_by_key(|&(_, _, ic)| order(indices[ic as usize]));
        let mut pair_prefix = [0; MAX_DEGREE + 1];
        for (d, slot) in pair_prefix.iter_mut().enumerate() {
            *slot = pairs
                .iter()
                .take_while(|&&(_, _, ic)| order(indices[ic as usize]) <= d)
                .count();
        }
        Tables {
            indices,
            pairs,
            pair_prefix,
        }
    })
}

/// Truncated multivariate Taylor series at a base point.
#[derive(Clone, Copy, PartialEq)]
pub struct TaylorValue {
    base: [f64; 3],
    degree: usize,
    coeffs: [f64; MAX_TERMS],
}

impl fmt::Debug for TaylorValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaylorValue")
            .field("base", &self.base)
            .field("degree", &self.degree)
            .field("coeffs", &self.coeffs())
            .finish()
    }
}

fn check_degree(degree: usize) -> Result<()> {
    if degree > MAX_DEGREE {
        Err(Error::DegreeTooLarge(degree))
    } else {
        Ok(())
    }
}

/// The coordinate functions `x`, `u`, `u1` as degree-`degree` series at `p`.
pub fn lift_variables(p: [f64; 3], degree: usize) -> Result<[TaylorValue; 3]> {
    Ok([
        TaylorValue::variable(p, degree, 0)?,
        TaylorValue::variable(p, degree, 1)?,
        TaylorValue::variable(p, degree, 2)?,
    ])
}

impl TaylorValue {
    pub fn constant(base: [f64; 3], degree: usize, value: f64) -> Result<Self> {
        check_degree(degree)?;
        let mut coeffs = [0.0; MAX_TERMS];
        coeffs[0] = value;
        Ok(Self { base, degree, coeffs })
    }

    /// Coordinate function number `var` (0 = x, 1 = u, 2 = u1).
    pub fn variable(base: [f64; 3], degree: usize, var: usize) -> Result<Self> {
        assert!(var < 3, "variable index out of range");
        let mut t = Self::constant(base, degree, base[var])?;
        if degree >= 1 {
            let mut sigma = [0; 3];
            sigma[var] = 1;
            t.coeffs[index_of(sigma)] = 1.0;
        }
        Ok(t)
    }

    /// Builds a series from raw coefficients in graded order. Missing
    /// trailing coefficients are zero.
    pub fn from_coeffs(base: [f64; 3], degree: usize, coeffs: &[f64]) -> Result<Self> {
        check_degree(degree)?;
        if coeffs.len() > term_count(degree) {
            return Err(Error::SeriesMismatch("too many coefficients for degree"));
        }
        let mut t = Self::constant(base, degree, 0.0)?;
        t.coeffs[..coeffs.len()].copy_from_slice(coeffs);
        Ok(t)
    }

    /// Builds the series whose partial derivatives at the base point are
    /// given by `partial(σ)`.
    pub fn from_partials(base: [f64; 3], degree: usize, mut partial: impl FnMut(MultiIndex) -> f64) -> Result<Self> {
        check_degree(degree)?;
        let mut t = Self::constant(base, degree, 0.0)?;
        for (k, &sigma) in multi_indices(degree).iter().enumerate() {
            t.coeffs[k] = partial(sigma) / multi_factorial(sigma);
        }
        Ok(t)
    }

    pub fn base(&self) -> [f64; 3] {
        self.base
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Constant term, i.e. the value at the base point.
    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    /// Copy with the constant term replaced.
    pub fn with_constant(&self, value: f64) -> Self {
        let mut out = *self;
        out.coeffs[0] = value;
        out
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs[..term_count(self.degree)]
    }

    pub fn coeff(&self, sigma: MultiIndex) -> f64 {
        if order(sigma) > self.degree {
            0.0
        } else {
            self.coeffs[index_of(sigma)]
        }
    }

    /// `∂^σ` of the series at the base point, `σ! c_σ`.
    pub fn partial(&self, sigma: MultiIndex) -> Result<f64> {
        let n = order(sigma);
        if n > self.degree {
            return Err(Error::OrderExceeded {
                order: n,
                degree: self.degree,
            });
        }
        Ok(multi_factorial(sigma) * self.coeffs[index_of(sigma)])
    }

    /// Partial derivative in variable `var` as a series of one degree less.
    pub fn derivative(&self, var: usize) -> Result<Self> {
        if self.degree == 0 {
            return Err(Error::OrderExceeded { order: 1, degree: 0 });
        }
        let mut out = Self::constant(self.base, self.degree - 1, 0.0)?;
        for (k, &sigma) in multi_indices(self.degree - 1).iter().enumerate() {
            let mut up = sigma;
            up[var] += 1;
            out.coeffs[k] = (up[var] as f64) * self.coeffs[index_of(up)];
        }
        Ok(out)
    }

    /// Repeated partial derivative `∂^σ` as a series of degree `degree - |σ|`.
    pub fn derivative_multi(&self, sigma: MultiIndex) -> Result<Self> {
        let mut t = *self;
        for (var, &count) in sigma.iter().enumerate() {
            for _ in 0..count {
                t = t.derivative(var)?;
            }
        }
        Ok(t)
    }

    /// Drops all terms above `degree`.
    pub fn truncate(&self, degree: usize) -> Result<Self> {
        if degree > self.degree {
            return Err(Error::OrderExceeded {
                order: degree,
                degree: self.degree,
            });
        }
        let mut out = *self;
        out.degree = degree;
        for c in &mut out.coeffs[term_count(degree)..] {
            *c = 0.0;
        }
        Ok(out)
    }

    /// Same base point and degree, constant value `c`.
    pub fn constant_like(&self, c: f64) -> Self {
        let mut out = *self;
        out.coeffs = [0.0; MAX_TERMS];
        out.coeffs[0] = c;
        out
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.degree != other.degree {
            return Err(Error::SeriesMismatch("degrees differ"));
        }
        if self.base != other.base {
            return Err(Error::SeriesMismatch("base points differ"));
        }
        Ok(())
    }

    fn zip(mut self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        let n = term_count(self.degree);
        for (a, b) in self.coeffs[..n].iter_mut().zip(&other.coeffs[..n]) {
            *a = f(*a, *b);
        }
        self
    }

    fn map(mut self, f: impl Fn(f64) -> f64) -> Self {
        let n = term_count(self.degree);
        for a in &mut self.coeffs[..n] {
            *a = f(*a);
        }
        self
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn checked_sub(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(self.zip(other, |a, b| a - b))
    }

    /// Cauchy product truncated at the shared degree.
    pub fn checked_mul(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(self.mul_unchecked(other))
    }

    fn mul_unchecked(&self, other: &Self) -> Self {
        let t = tables();
        let mut out = self.constant_like(0.0);
        for &(ia, ib, ic) in &t.pairs[..t.pair_prefix[self.degree]] {
            out.coeffs[ic as usize] += self.coeffs[ia as usize] * other.coeffs[ib as usize];
        }
        out
    }

    pub fn checked_div(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(self.mul_unchecked(&other.recip()?))
    }

    /// `1 / self` through the nilpotent geometric series
    /// `(1/c) Σ (-(self - c)/c)^n`.
    pub fn recip(&self) -> Result<Self> {
        let c = self.value();
        if c.abs() <= SINGULAR_THRESHOLD {
            return Err(Error::DivisionBySingular(c));
        }
        let mut g = [0.0; MAX_DEGREE + 1];
        let mut p = 1.0 / c;
        for slot in g.iter_mut().take(self.degree + 1) {
            *slot = p;
            p *= -1.0 / c;
        }
        Ok(self.apply_univariate(&g))
    }

    /// `Σ g_n h^n` with `h = self - value()`, by Horner's rule.
    fn apply_univariate(&self, g: &[f64]) -> Self {
        let mut h = *self;
        h.coeffs[0] = 0.0;
        let mut acc = self.constant_like(g[self.degree]);
        for n in (0..self.degree).rev() {
            acc = acc.mul_unchecked(&h);
            acc.coeffs[0] += g[n];
        }
        acc
    }

    pub fn powi(&self, n: i32) -> Result<Self> {
        let base = if n < 0 { self.recip()? } else { *self };
        let mut e = n.unsigned_abs();
        let mut acc = self.constant_like(1.0);
        let mut sq = base;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc.mul_unchecked(&sq);
            }
            e >>= 1;
            if e > 0 {
                sq = sq.mul_unchecked(&sq);
            }
        }
        Ok(acc)
    }

    pub fn compose_elementary(&self, func: Elementary) -> Result<Self> {
        let g = func.taylor_coeffs(self.value(), self.degree)?;
        Ok(self.apply_univariate(&g))
    }

    /// Substitutes series for the three base variables.
    ///
    /// `args` must share one base point and degree, and their constant
    /// terms must equal this series' base point; the result lives at the
    /// arguments' base point. `self.degree` must be at least the
    /// arguments' degree.
    pub fn compose(&self, args: &[TaylorValue; 3]) -> Result<Self> {
        args[0].check_compatible(&args[1])?;
        args[0].check_compatible(&args[2])?;
        let d = args[0].degree;
        if self.degree < d {
            return Err(Error::SeriesMismatch("outer series degree below argument degree"));
        }
        let mut powers = [[args[0].constant_like(0.0); MAX_DEGREE + 1]; 3];
        for (k, arg) in args.iter().enumerate() {
            let mut h = *arg;
            let offset = h.coeffs[0] - self.base[k];
            let scale = 1.0 + self.base[k].abs();
            if offset.abs() > 1e-9 * scale {
                return Err(Error::SeriesMismatch("argument constant term differs from base point"));
            }
            h.coeffs[0] = 0.0;
            powers[k][0] = h.constant_like(1.0);
            for e in 1..=d {
                powers[k][e] = powers[k][e - 1].mul_unchecked(&h);
            }
        }
        let mut out = args[0].constant_like(0.0);
        for (k, &[i, j, l]) in multi_indices(d).iter().enumerate() {
            let c = self.coeffs[k];
            if c == 0.0 {
                continue;
            }
            let term = powers[0][i].mul_unchecked(&powers[1][j]).mul_unchecked(&powers[2][l]);
            out = out.zip(&term, |a, b| a + c * b);
        }
        Ok(out)
    }
}

/// Elementary functions available to expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Elementary {
    Exp,
    Log,
    Sin,
    Cos,
    Tan,
    Atan,
    Sqrt,
}

impl Elementary {
    pub const ALL: [Elementary; 7] = [
        Elementary::Exp,
        Elementary::Log,
        Elementary::Sin,
        Elementary::Cos,
        Elementary::Tan,
        Elementary::Atan,
        Elementary::Sqrt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Elementary::Exp => "exp",
            Elementary::Log => "log",
            Elementary::Sin => "sin",
            Elementary::Cos => "cos",
            Elementary::Tan => "tan",
            Elementary::Atan => "atan",
            Elementary::Sqrt => "sqrt",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    fn domain_error(self, value: f64) -> Error {
        Error::Domain {
            func: self.name(),
            value,
        }
    }

    /// Scalar evaluation with domain checks.
    pub fn eval(self, v: f64) -> Result<f64> {
        match self {
            Elementary::Exp => Ok(v.exp()),
            Elementary::Log if v <= 0.0 => Err(self.domain_error(v)),
            Elementary::Log => Ok(v.ln()),
            Elementary::Sin => Ok(v.sin()),
            Elementary::Cos => Ok(v.cos()),
            Elementary::Tan => {
                let c = v.cos();
                if c.abs() <= SINGULAR_THRESHOLD {
                    Err(Error::DivisionBySingular(c))
                } else {
                    Ok(v.sin() / c)
                }
            }
            Elementary::Atan => Ok(v.atan()),
            Elementary::Sqrt if v < 0.0 => Err(self.domain_error(v)),
            Elementary::Sqrt => Ok(v.sqrt()),
        }
    }

    /// Univariate Taylor coefficients `f^(n)(c) / n!` for `n <= degree`.
    fn taylor_coeffs(self, c: f64, degree: usize) -> Result<[f64; MAX_DEGREE + 1]> {
        let mut g = [0.0; MAX_DEGREE + 1];
        match self {
            Elementary::Exp => {
                let e = c.exp();
                for (n, slot) in g.iter_mut().enumerate() {
                    *slot = e / factorial(n);
                }
            }
            Elementary::Log => {
                if c <= 0.0 {
                    return Err(self.domain_error(c));
                }
                g[0] = c.ln();
                for (n, slot) in g.iter_mut().enumerate().skip(1) {
                    let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
                    *slot = sign / (n as f64 * c.powi(n as i32));
                }
            }
            Elementary::Sin | Elementary::Cos => {
                let (s, co) = c.sin_cos();
                let cycle = if self == Elementary::Sin {
                    [s, co, -s, -co]
                } else {
                    [co, -s, -co, s]
                };
                for (n, slot) in g.iter_mut().enumerate() {
                    *slot = cycle[n % 4] / factorial(n);
                }
            }
            Elementary::Tan => {
                // tan = sin / cos on truncated univariate series
                let sin = Elementary::Sin.taylor_coeffs(c, degree)?;
                let cos = Elementary::Cos.taylor_coeffs(c, degree)?;
                if cos[0].abs() <= SINGULAR_THRESHOLD {
                    return Err(Error::DivisionBySingular(cos[0]));
                }
                g = univariate_div(&sin, &cos, degree);
            }
            Elementary::Atan => {
                // atan' = 1 / (1 + (c + t)^2)
                let mut q = [0.0; MAX_DEGREE + 1];
                q[0] = 1.0 + c * c;
                q[1] = 2.0 * c;
                q[2] = 1.0;
                let mut one = [0.0; MAX_DEGREE + 1];
                one[0] = 1.0;
                let r = univariate_div(&one, &q, degree);
                g[0] = c.atan();
                for n in 1..=degree {
                    g[n] = r[n - 1] / n as f64;
                }
            }
            Elementary::Sqrt => {
                if c <= 0.0 {
                    return Err(self.domain_error(c));
                }
                // binomial series of (c + t)^(1/2)
                let mut binom = 1.0;
                for (n, slot) in g.iter_mut().enumerate() {
                    if n > 0 {
                        binom *= (0.5 - (n as f64 - 1.0)) / n as f64;
                    }
                    *slot = binom * c.powf(0.5 - n as f64);
                }
            }
        }
        Ok(g)
    }
}

fn univariate_div(num: &[f64], den: &[f64], degree: usize) -> [f64; MAX_DEGREE + 1] {
    let mut q = [0.0; MAX_DEGREE + 1];
    for n in 0..=degree {
        let mut acc = num[n];
        for k in 1..=n {
            acc -= den[k] * q[n - k];
        }
        q[n] = acc / den[0];
    }
    q
}

/// Arithmetic carrier for expression evaluation and invariant formulas:
/// plain reals or [`TaylorValue`].
///
/// The operator impls of [`TaylorValue`] panic on mismatched operands; the
/// fallible methods here cover the value-dependent failures.
pub trait Scalar:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// A constant with the same shape as `self`.
    fn constant_like(&self, c: f64) -> Self;
    /// Value at the base point.
    fn value(&self) -> f64;
    fn checked_div(self, rhs: Self) -> Result<Self>;
    fn powi(self, n: i32) -> Result<Self>;
    fn elementary(self, func: Elementary) -> Result<Self>;
}

impl Scalar for f64 {
    fn constant_like(&self, c: f64) -> Self {
        c
    }

    fn value(&self) -> f64 {
        *self
    }

    fn checked_div(self, rhs: Self) -> Result<Self> {
        if rhs.abs() <= SINGULAR_THRESHOLD {
            Err(Error::DivisionBySingular(rhs))
        } else {
            Ok(self / rhs)
        }
    }

    fn powi(self, n: i32) -> Result<Self> {
        if n < 0 && self.abs() <= SINGULAR_THRESHOLD {
            return Err(Error::DivisionBySingular(self));
        }
        // repeated multiplication keeps the result bit-identical to the
        // constant term of the series route
        let mut e = n.unsigned_abs();
        let base = if n < 0 { 1.0 / self } else { self };
        let mut acc = 1.0;
        let mut sq = base;
        while e > 0 {
            if e & 1 == 1 {
                acc *= sq;
            }
            e >>= 1;
            if e > 0 {
                sq *= sq;
            }
        }
        Ok(acc)
    }

    fn elementary(self, func: Elementary) -> Result<Self> {
        func.eval(self)
    }
}

impl Scalar for TaylorValue {
    fn constant_like(&self, c: f64) -> Self {
        TaylorValue::constant_like(self, c)
    }

    fn value(&self) -> f64 {
        TaylorValue::value(self)
    }

    fn checked_div(self, rhs: Self) -> Result<Self> {
        TaylorValue::checked_div(&self, &rhs)
    }

    fn powi(self, n: i32) -> Result<Self> {
        TaylorValue::powi(&self, n)
    }

    fn elementary(self, func: Elementary) -> Result<Self> {
        self.compose_elementary(func)
    }
}

impl Add for TaylorValue {
    type Output = TaylorValue;
    fn add(self, rhs: Self) -> Self {
        self.checked_add(&rhs).expect("series arithmetic")
    }
}

impl Sub for TaylorValue {
    type Output = TaylorValue;
    fn sub(self, rhs: Self) -> Self {
        self.checked_sub(&rhs).expect("series arithmetic")
    }
}

impl Mul for TaylorValue {
    type Output = TaylorValue;
    fn mul(self, rhs: Self) -> Self {
        self.checked_mul(&rhs).expect("series arithmetic")
    }
}

/// Like `f64` division, a singular divisor yields non-finite coefficients
/// instead of an error; use [`TaylorValue::checked_div`] to detect it.
impl Div for TaylorValue {
    type Output = TaylorValue;
    fn div(self, rhs: Self) -> Self {
        self.check_compatible(&rhs).expect("series arithmetic");
        match rhs.recip() {
            Ok(r) => self.mul_unchecked(&r),
            Err(_) => self.map(|_| f64::NAN),
        }
    }
}

impl Neg for TaylorValue {
    type Output = TaylorValue;
    fn neg(self) -> Self {
        self.map(|a| -a)
    }
}

impl Add<f64> for TaylorValue {
    type Output = TaylorValue;
    fn add(mut self, rhs: f64) -> Self {
        self.coeffs[0] += rhs;
        self
    }
}

impl Sub<f64> for TaylorValue {
    type Output = TaylorValue;
    fn sub(mut self, rhs: f64) -> Self {
        self.coeffs[0] -= rhs;
        self
    }
}

impl Mul<f64> for TaylorValue {
    type Output = TaylorValue;
    fn mul(self, rhs: f64) -> Self {
        self.map(|a| a * rhs)
    }
}

impl Div<f64> for TaylorValue {
    type Output = TaylorValue;
    fn div(self, rhs: f64) -> Self {
        self.map(|a| a / rhs)
    }
}

impl Mul<TaylorValue> for f64 {
    type Output = TaylorValue;
    fn mul(self, rhs: TaylorValue) -> TaylorValue {
        rhs * self
    }
}
