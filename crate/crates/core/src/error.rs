use crate::alphabet::{Alphabet, LambdaPCertificate};
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("alphabet is empty")]
    EmptyAlphabet,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("coefficient vector has {coeffs} entries but alphabet has {elements}")]
    CoefficientMismatch { coeffs: usize, elements: usize },

    #[error("invalid exponent p = {p}: {reason}")]
    InvalidExponent { p: f64, reason: &'static str },

    #[error("invalid spacing {spacing}: must be positive{}", if *max_allowed < f64::INFINITY { format!(" and at most {max_allowed}") } else { String::new() })]
    InvalidSpacing { spacing: f64, max_allowed: f64 },

    #[error("quadrature grid of {requested} points exceeds budget {budget}")]
    QuadratureBudget { requested: u64, budget: u64 },

    #[error("iteration budget must be nonzero")]
    ZeroBudget,

    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error(
        "search exhausted its budget: best constant {constant} exceeds cap {cap} (best set retained)"
    )]
    SearchFailure {
        best: Box<Alphabet>,
        certificate: Box<LambdaPCertificate>,
        constant: f64,
        cap: f64,
    },

    #[error("alphabet at level {level} does not match plan: {reason}")]
    PlanMismatch { level: usize, reason: String },

    #[error("stage would contain {nodes} nodes, exceeding budget {budget}")]
    NodeBudget { nodes: u64, budget: u64 },

    #[error("point is not a node at level {level}")]
    NotANode { level: usize },

    #[error("radius must be positive, got {0}")]
    InvalidRadius(f64),

    #[error("point lies outside the unit cube")]
    OutsideUnitCube,

    #[error("fewer than {needed} annuli in fit range [{lo}, {hi}]")]
    TooFewAnnuli { needed: usize, lo: f64, hi: f64 },

    #[error("radius list must be nonempty and strictly increasing")]
    BadRadiusList,

    #[error("cube side must be positive, got {0}")]
    BadCubeSide(f64),

    #[error("cube J has side {side} but the stage requires side {required}")]
    CubeSideMismatch { side: f64, required: f64 },

    #[error("sampled grid does not cover the weight cube dilated by {required_factor}")]
    GridCoverage { required_factor: f64 },

    #[error("matrix entries must be nonnegative")]
    NegativeEntry,

    #[error("unsupported stage format version {0}")]
    FormatVersion(u32),

    #[error("stage document is inconsistent: {0}")]
    BadDocument(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
