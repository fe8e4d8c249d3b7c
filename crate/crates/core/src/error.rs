use thiserror::Error;

use crate::invariants::Flag;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("series mismatch: {0}")]
    SeriesMismatch(&'static str),

    #[error("division by a value with singular constant term ({0:e})")]
    DivisionBySingular(f64),

    #[error("{func} is undefined at {value}")]
    Domain { func: &'static str, value: f64 },

    #[error("derivative order {order} exceeds series degree {degree}")]
    OrderExceeded { order: usize, degree: usize },

    #[error("series degree {0} exceeds the supported maximum")]
    DegreeTooLarge(usize),

    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },

    #[error("function `{func}` takes {expected} argument(s), got {found}")]
    Arity {
        func: String,
        expected: usize,
        found: usize,
    },

    #[error("variable `{0}` is not bound")]
    UnboundVariable(&'static str),

    #[error("point is not regular: {0}")]
    NonRegular(Flag),

    #[error("commutation relation violated: {relation} residual {residual:e} (scale {scale:e})")]
    RelationViolation {
        relation: &'static str,
        residual: f64,
        scale: f64,
    },

    #[error("singular transformation: {0}")]
    SingularTransform(String),

    #[error("feedback map is not invertible near ({x}, {u}): {reason}")]
    NotInvertible { x: f64, u: f64, reason: String },

    #[error("point ({0}, {1}, {2}) lies outside the image of the source domain")]
    OutsideImage(f64, f64, f64),

    #[error("no regular point in the sampled domain")]
    EmptyCloud,

    #[error("too few samples: {found} < {needed}")]
    TooFewSamples { found: usize, needed: usize },

    #[error("invariant basis is dependent (condition {0:e})")]
    DependentBasis(f64),

    #[error("jet order {k} outside supported range {min}..={max}")]
    JetOrderOutOfRange { k: usize, min: usize, max: usize },

    #[error("invalid input: {0}")]
    Invalid(String),
}
