//! Diagrams of Lebesgue classes for prepared log-monomial sums.
//!
//! For a family `f(x, y)` of functions on the fibers of a rectilinear cell,
//! weighted by `|μ|^q` and a Jacobian monomial, the set of exponents `p` with
//! `f(x, ·) ∈ L^p` depends on `x` only through which critical coefficient
//! groups vanish identically at `x`. This crate computes that dependence
//! exactly and checks it against a numerical quadrature oracle.
//!
//! Modules, bottom up:
//!
//! * [`exact`]: rationals, `a + b·q` numbers and intervals of `(0, ∞]`.
//! * [`dickson`]: minimal antichains and partitions of upward closures in `N^k`.
//! * [`series`]: truncated polynomials, the critical/noncritical split and
//!   collapsed asymptotics along power curves.
//! * [`expr`]: symbolic functions used for units and cell bounds.
//! * [`prepared`]: prepared sums, critical groups and vanishing witnesses.
//! * [`rectilinear`]: monomially bounded cells, the pullback steps and the
//!   rectilinearization driver.
//! * [`lclass`]: one-variable verdicts, per-configuration intervals and diagrams.
//! * [`oracle`]: quadrature, sup estimates and inequality checks.
//! * [`cli`]: instance parsing and the JSON report pipeline.

pub mod cli;
pub mod dickson;
pub mod exact;
pub mod expr;
pub mod lclass;
pub mod oracle;
pub mod prepared;
pub mod rectilinear;
pub mod series;

pub use exact::{PInterval, QLin, Rat};

/// Errors shared by every module.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("unsupported input: {0}")]
    Unsupported(String),
    #[error("step rejected: {0}")]
    StepRejected(String),
    #[error("resource cap exceeded: {0}")]
    Resource(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;
