//! Feedback invariants of scalar control systems `x' = F(x, u, u')`.
//!
//! The crate provides truncated multivariate Taylor arithmetic, an
//! expression parser for right-hand sides, the differential invariants
//! `J` and `K` with the invariant derivations, feedback transformations,
//! signature clouds for equivalence testing, and orbit-dimension counts on
//! jet spaces.

pub mod error;
pub mod expr;
pub mod invariants;
pub mod orbits;
pub mod signature;
pub mod system;
pub mod taylor;
pub mod transform;

pub use error::{Error, Result};
pub use expr::{Expression, Var};
pub use invariants::{
    eval_j, eval_k, regularity, signature_vector, Flag, Jet, KRoute, RegularityFlags, SignatureVector,
};
pub use signature::{build_cloud, compare, CompareOptions, Side, SignatureCloud, Status, Verdict};
pub use system::{Domain, JetSource, SystemDef};
pub use taylor::TaylorValue;
pub use transform::{random_feedback, FeedbackMap, TransformedSystem};
