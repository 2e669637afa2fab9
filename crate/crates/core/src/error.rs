//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants carry the quantities
//! a caller needs to diagnose the failure (offending value, certified bound,
//! iteration count) rather than prose alone.

use thiserror::Error;

/// Errors raised by geometry construction, weight evaluation, coefficient
/// certification, solvers, and the reconstruction pipeline.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A coordinate vector's length does not match the domain dimension.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Grid resolution below the minimum needed by the widest stencil.
    #[error("resolution too small: need at least {min} nodes per axis, got {got}")]
    ResolutionTooSmall { min: usize, got: usize },

    /// Too few time levels.
    #[error("time-level count too small: need at least {min}, got {got}")]
    TimeLevelsTooSmall { min: usize, got: usize },

    /// The level function ψ must be positive where a weight is evaluated.
    #[error("weight undefined: level function value {psi} is not positive")]
    WeightDomain { psi: f64 },

    /// exp(λψ^{−μ}) exceeds the largest finite scalar; callers must switch to
    /// log-space evaluation (`log_value` is λψ^{−μ}, i.e. ln Φ).
    #[error(
        "weight overflow: ln phi = {log_value} exceeds the finite range; \
         evaluate in log space (use `log_value`/`log_sq`)"
    )]
    WeightOverflow { log_value: f64 },

    /// Weight parameters outside the admissible range λ ≥ 1, μ ≥ 1.
    #[error("weight parameters out of range: lambda = {lambda}, mu = {mu} (need both >= 1)")]
    WeightParams { lambda: f64, mu: f64 },

    /// Principal coefficient matrix not symmetric at a node.
    #[error("coefficient symmetry violated at node {node}: |a{i}{j} - a{j}{i}| = {defect}")]
    SymmetryViolation {
        node: usize,
        i: usize,
        j: usize,
        defect: f64,
    },

    /// Principal coefficient matrix not uniformly elliptic.
    #[error("ellipticity violated: smallest eigenvalue estimate {nu_est} at node {node}")]
    EllipticityViolation { node: usize, nu_est: f64 },

    /// The normalizing factor R dipped below the certified floor σ.
    #[error("positivity floor violated: min |R| = {min_abs} < sigma = {sigma} at node {node}")]
    PositivityViolation {
        node: usize,
        min_abs: f64,
        sigma: f64,
    },

    /// An iterative linear solve stagnated or diverged.
    #[error("{solver} failed after {iterations} iterations: relative residual {residual}")]
    SolverFailure {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// A check requires compact support and the field has boundary mass.
    #[error(
        "field not compactly supported: boundary magnitude {boundary_max} \
         exceeds 1e-12 x scale {scale}"
    )]
    NotCompactlySupported { boundary_max: f64, scale: f64 },

    /// A check rejects the identically-zero field.
    #[error("field is identically zero; the check is vacuous on it")]
    ZeroField,

    /// Initial and terminal slices were required to match and do not.
    #[error("slice mismatch: initial and terminal slices differ by {defect} (max norm)")]
    SliceMismatch { defect: f64 },

    /// A precondition of an operation was violated (free-form diagnostics).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Malformed tabular input (coefficient or field CSV).
    #[error("table parse error at line {line}: {what}")]
    TableParse { line: usize, what: String },
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
