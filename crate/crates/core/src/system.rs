//! Control systems `x' = F(x, u, u1)` and their local Taylor data.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Binding, Expression, Var};
use crate::taylor::{lift_variables, TaylorValue};

/// Axis-aligned box in `(x, u, u1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub x: [f64; 2],
    pub u: [f64; 2],
    pub u1: [f64; 2],
}

impl Domain {
    pub fn new(x: [f64; 2], u: [f64; 2], u1: [f64; 2]) -> Result<Self> {
        for (name, r) in [("x", x), ("u", u), ("u1", u1)] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(Error::Invalid(format!("bad {name} range [{}, {}]", r[0], r[1])));
            }
        }
        Ok(Self { x, u, u1 })
    }

    pub fn ranges(&self) -> [[f64; 2]; 3] {
        [self.x, self.u, self.u1]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.contains_with_slack(p, 0.0)
    }

    /// Membership with a relative slack on every side.
    pub fn contains_with_slack(&self, p: [f64; 3], slack: f64) -> bool {
        self.ranges().iter().zip(p).all(|(r, v)| {
            let pad = slack * (r[1] - r[0]).max(1e-12);
            v >= r[0] - pad && v <= r[1] + pad
        })
    }

    /// Tensor grid, `x` varying slowest and `u1` fastest.
    pub fn grid(&self, n: [usize; 3]) -> Vec<[f64; 3]> {
        let axis = |r: [f64; 2], k: usize| -> Vec<f64> {
            if k <= 1 {
                vec![0.5 * (r[0] + r[1])]
            } else {
                (0..k)
                    .map(|i| r[0] + (r[1] - r[0]) * i as f64 / (k - 1) as f64)
                    .collect()
            }
        };
        let (xs, us, ws) = (axis(self.x, n[0]), axis(self.u, n[1]), axis(self.u1, n[2]));
        let mut out = Vec::with_capacity(xs.len() * us.len() * ws.len());
        for &x in &xs {
            for &u in &us {
                for &w in &ws {
                    out.push([x, u, w]);
                }
            }
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        self.ranges()
            .map(|r| if r[1] > r[0] { rng.gen_range(r[0]..=r[1]) } else { r[0] })
    }

    /// Smallest box containing all `points`.
    pub fn bounding(points: impl IntoIterator<Item = [f64; 3]>) -> Option<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for p in points {
            any = true;
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        any.then(|| Self {
            x: [lo[0], hi[0]],
            u: [lo[1], hi[1]],
            u1: [lo[2], hi[2]],
        })
    }
}

/// Anything that can produce the local Taylor series of a right-hand side
/// `F` at points of its domain.
pub trait JetSource: Send + Sync {
    fn name(&self) -> &str;
    fn domain(&self) -> Domain;
    /// Taylor series of `F` at `p` truncated at `degree`.
    fn series_at(&self, p: [f64; 3], degree: usize) -> Result<TaylorValue>;
}

/// A control system given by an expression for its right-hand side.
#[derive(Debug, Clone)]
pub struct SystemDef {
    name: String,
    f: Expression,
    domain: Domain,
}

impl SystemDef {
    pub fn new(name: impl Into<String>, f: Expression, domain: Domain) -> Self {
        Self {
            name: name.into(),
            f,
            domain,
        }
    }

    pub fn parse(name: impl Into<String>, f: &str, domain: Domain) -> Result<Self> {
        Ok(Self::new(name, Expression::parse(f, &Var::ALL)?, domain))
    }

    pub fn expression(&self) -> &Expression {
        &self.f
    }

    pub fn eval(&self, p: [f64; 3]) -> Result<f64> {
        self.f.eval(&Binding::from_array(p))
    }

    pub fn with_domain(&self, domain: Domain) -> Self {
        Self { domain, ..self.clone() }
    }
}

impl JetSource for SystemDef {
    fn name(&self) -> &str {
        &self.name
    }

    fn domain(&self) -> Domain {
        self.domain
    }

    fn series_at(&self, p: [f64; 3], degree: usize) -> Result<TaylorValue> {
        let vars = lift_variables(p, degree)?;
        self.f.eval(&Binding::from_array(vars))
    }
}
