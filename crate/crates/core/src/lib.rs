//! Numerical kernels for a t-independent Carleman estimate on parabolic
//! operators, and the transformation chain that reduces initial/terminal +
//! lateral Cauchy data to a linear quasi-reversibility reconstruction of a
//! spatial source factor.
//!
//! The library is organized bottom-up:
//!
//! * [`geometry`] — the paraboloid-slab family of domains carved out of the
//!   level function ψ(x) = x₁ + |x̄|²/2 + 1/4, uniform tensor grids over their
//!   bounding boxes, and boundary tagging (data face Γ at x₁ = 0, prism faces,
//!   staircase lateral boundary).
//! * [`weights`] — the weight Φ(x) = exp(λ ψ(x)^{−μ}) with closed-form
//!   derivative bundles and log-space evaluation for large λ.
//! * [`field`] / [`diff`] — space–time grid functions and the second-order
//!   finite-difference stencils (central interior, one-sided at edges,
//!   composed mixed derivatives).
//! * [`operators`] — elliptic coefficient bundles a(x), b(x), c(x) with
//!   ellipticity certification, the principal/full operator applications, and
//!   a backward-Euler forward solver producing synthetic Cauchy data.
//! * [`carleman`] — the pointwise decomposition (w = uΦ) into four terms, the
//!   divergence-structure densities (time density V and spatial flux U), the
//!   slice cancellation defect, the identity-chain report, and the integrated
//!   estimate sweep over λ.
//! * [`isp`] — the inverse source pipeline: division by the positive factor R,
//!   the transformed operator, the time-interpolated auxiliary problem for
//!   w = v_t − I, the weighted least-squares reconstruction, calibrated noise
//!   injection, and δ-sweeps measuring stability slopes.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (implemented for
//! `f32` and `f64`); the aliases below fix the default `f64` lane.

pub mod carleman;
pub mod corpus;
pub mod diff;
pub mod error;
pub mod field;
pub mod geometry;
pub mod isp;
pub mod linalg;
pub mod operators;
pub mod scalar;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type for desk-scale experiments.
pub type Real = f64;

/// Space–time grid over the default scalar.
pub type Grid = geometry::SpaceTimeGrid<Real>;
/// Domain description over the default scalar.
pub type Domain = geometry::Domain<Real>;
/// Carleman weight over the default scalar.
pub type Weight = weights::CarlemanWeight<Real>;
/// Space–time grid function over the default scalar.
pub type Field = field::Field<Real>;
/// Single-time-slice grid function over the default scalar.
pub type SpatialField = field::SpatialField<Real>;
/// Elliptic coefficient bundle over the default scalar.
pub type Coefficients = operators::EllipticCoefficients<Real>;
/// Four-term pointwise decomposition over the default scalar.
pub type Terms = carleman::CarlemanTerms<Real>;
/// Integrated-estimate report over the default scalar.
pub type EstimateReport = carleman::EstimateReport<Real>;
/// Inverse-problem data bundle over the default scalar.
pub type Data = isp::IspData<Real>;
/// Reconstruction output over the default scalar.
pub type Reconstruction = isp::Reconstruction<Real>;
/// Noise-sweep output over the default scalar.
pub type SweepResult = isp::SweepResult<Real>;
