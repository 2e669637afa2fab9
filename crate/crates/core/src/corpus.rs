//! Reusable analytic test fixtures: a manufactured inverse-problem scenario
//! with a known source factor, seeded random smooth coefficient fields, and
//! polynomial / bump space-time fields for discretization studies.
//!
//! The manufactured scenario is built so that every piece of measurement data
//! is available in closed form.  The reference solution is
//!
//! ```text
//! u*(x, t) = e^{-t} (2 + x) + eps e^{-2t} sin(k x),        k = pi / L,
//! b*(x)    = 2 + sin(k x),
//! R(x, t)  = (u*_t - u*_xx) / b*(x),
//! ```
//!
//! with `eps = 0.6 / (k^2 - 2)` chosen small enough that `R` stays uniformly
//! away from zero on the whole cylinder (|R| >= 0.33 for T <= 0.75), so the
//! positivity threshold `sigma = 0.25` is honored with margin.  The profile
//! uses a half period so that quotient fields such as `u*/R` keep moderate
//! high-order derivatives and truncation errors stay visible but small.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{Field, SpatialField, Trace};
use crate::geometry::{DataBoundary, Domain, SpaceTimeGrid};
use crate::isp::IspData;
use crate::operators::EllipticCoefficients;
use crate::scalar::Scalar;
use crate::{diff, geometry};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A fully specified manufactured reconstruction problem: grid, operator,
/// exact source factor, measurement data, and the exact space-time solution.
pub struct Scenario<S: Scalar> {
    /// Space-time grid.
    pub grid: Arc<SpaceTimeGrid<S>>,
    /// Elliptic operator coefficients (pure Laplacian for this scenario).
    pub co: EllipticCoefficients<S>,
    /// Exact source factor `b*`.
    pub b_true: SpatialField<S>,
    /// Measurement bundle consumed by the reconstruction pipeline.
    pub data: IspData<S>,
    /// Exact solution sampled on the grid (for error reporting).
    pub u_star: Field<S>,
}

/// Builds the manufactured one-dimensional scenario on `domain`, which must
/// be a one-dimensional box `(0, L)`.  Lateral Dirichlet data is sampled from
/// the exact solution; Neumann data uses the same one-sided stencil as the
/// forward solver so that data and discretization are mutually consistent.
pub fn manufactured_interval<S: Scalar>(
    domain: Domain<S>,
    res: usize,
    nt: usize,
    t_final: S,
    boundary: DataBoundary,
) -> Result<Scenario<S>> {
    if domain.dim() != 1 || !domain.is_box() {
        return Err(Error::Precondition(
            "manufactured scenario requires a one-dimensional box domain".into(),
        ));
    }
    if !(t_final <= S::lit(0.75)) {
        return Err(Error::Precondition(
            "manufactured scenario keeps |R| >= 0.33 only for t_final <= 0.75".into(),
        ));
    }
    let (lo, hi) = domain.bounding_box();
    let length = hi[0] - lo[0];
    let k = S::PI() / length;
    if !(k * k > S::lit(2.5)) {
        return Err(Error::Precondition(
            "manufactured scenario requires an interval shorter than about 2".into(),
        ));
    }
    let eps = S::lit(0.6) / (k * k - S::lit(2.0));
    let two = S::lit(2.0);

    let u_exact = move |x: S, t: S| -> S {
        (-t).exp() * (two + x) + eps * (-two * t).exp() * (k * x).sin()
    };
    // u*_t - u*_xx = -e^{-t}(2+x) + eps (k^2 - 2) e^{-2t} sin(kx); with
    // eps (k^2 - 2) = 0.6 the forcing numerator is available in closed form.
    let b_exact = move |x: S| -> S { two + (k * x).sin() };
    let r_exact = move |x: S, t: S| -> S {
        (-(-t).exp() * (two + x) + S::lit(0.6) * (-two * t).exp() * (k * x).sin()) / b_exact(x)
    };

    let grid = Arc::new(SpaceTimeGrid::build(domain, res, t_final, nt)?);
    let co = EllipticCoefficients::laplacian(grid.clone());
    let b_true = SpatialField::from_fn(grid.clone(), |x| b_exact(x[0]));
    let u_star = Field::from_fn(grid.clone(), |x, t| u_exact(x[0], t));
    let r = Field::from_fn(grid.clone(), |x, t| r_exact(x[0], t));

    let f = u_star.slice(0);
    let big_f = u_star.slice(grid.nt() - 1);

    let data_nodes = grid.data_nodes(boundary);
    let p = Trace::from_fn(grid.clone(), data_nodes.clone(), |x, t| u_exact(x[0], t));
    // Neumann trace via the solver's own one-sided outward-normal stencil on
    // the sampled exact solution.
    let mut q = Trace::zeros(grid.clone(), data_nodes.clone());
    for m in 0..grid.nt() {
        let vals = u_star.level_values(m);
        for (kk, &node) in data_nodes.iter().enumerate() {
            let (axis, positive) = face_axis_side_of(&grid, node)?;
            let dn = diff::normal_derivative_at(&grid, vals, node, axis, positive);
            q.set(kk, m, dn);
        }
    }

    let data = IspData::new(p, q, f, big_f, r, S::lit(0.25), boundary)?;
    Ok(Scenario { grid, co, b_true, data, u_star })
}

/// Outward-face orientation of a lateral boundary node.
fn face_axis_side_of<S: Scalar>(
    grid: &SpaceTimeGrid<S>,
    node: usize,
) -> Result<(usize, bool)> {
    match grid.status(node) {
        geometry::SpatialStatus::Boundary(tag) => tag.face_axis_side().ok_or_else(|| {
            Error::Precondition("data node has no grid-aligned outward face".into())
        }),
        _ => Err(Error::Precondition("data node is not on the lateral boundary".into())),
    }
}

/// Seeded random smooth source factor: a low-order trigonometric series along
/// the first axis with `1/j^2` decay, kept uniformly positive.
pub fn random_b<S: Scalar>(
    grid: &Arc<SpaceTimeGrid<S>>,
    seed: u64,
    base: S,
    amp: S,
) -> SpatialField<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = grid.domain().bounding_box();
    let length = hi[0] - lo[0];
    let mut coeffs = Vec::new();
    for j in 1..=3usize {
        let c: f64 = rng.gen_range(-1.0..1.0);
        let d: f64 = rng.gen_range(-1.0..1.0);
        let decay = S::of(j * j);
        coeffs.push((S::of(j), S::lit(c) / decay, S::lit(d) / decay));
    }
    let two_pi = S::lit(2.0) * S::PI();
    SpatialField::from_fn(grid.clone(), move |x| {
        let xi = (x[0] - lo[0]) / length;
        let mut s = S::zero();
        for &(j, c, d) in &coeffs {
            let arg = two_pi * j * xi;
            s += c * arg.sin() + d * arg.cos();
        }
        base + amp * s
    })
}

/// Smooth tensor-product polynomial space-time field: degree four along each
/// spatial axis, cubic in time.  Central second differences are not exact on
/// it, so it exercises genuine truncation error.
pub fn polynomial_field<S: Scalar>(grid: &Arc<SpaceTimeGrid<S>>) -> Field<S> {
    Field::from_fn(grid.clone(), |x, t| {
        let mut p = S::one() + t + S::lit(0.5) * t * t + S::lit(0.25) * t * t * t;
        for &xi in x {
            p *= S::lit(0.5) + xi + S::lit(0.75) * xi * xi - S::lit(0.5) * xi * xi * xi
                + S::lit(0.25) * xi * xi * xi * xi;
        }
        p
    })
}

/// Compactly supported space-time bump: a product of `(1 - s^2)^4` profiles in
/// each spatial direction (centered in the domain, width 0.8 of the
/// half-extent) times the same profile in time.  Vanishes with three
/// derivatives at the support edge, well inside the cylinder boundary.
pub fn bump_field<S: Scalar>(grid: &Arc<SpaceTimeGrid<S>>) -> Field<S> {
    let (lo, hi) = grid.domain().bounding_box();
    let t_final = grid.t_final();
    let half = S::lit(0.5);
    let centers: Vec<S> = lo.iter().zip(hi.iter()).map(|(&a, &b)| half * (a + b)).collect();
    let widths: Vec<S> =
        lo.iter().zip(hi.iter()).map(|(&a, &b)| S::lit(0.4) * (b - a)).collect();
    let profile = |s: S| -> S {
        if s.abs() < S::one() {
            let q = S::one() - s * s;
            q * q * q * q
        } else {
            S::zero()
        }
    };
    Field::from_fn(grid.clone(), move |x, t| {
        let mut v = profile((t - half * t_final) / (S::lit(0.4) * t_final));
        for (i, &xi) in x.iter().enumerate() {
            v = v * profile((xi - centers[i]) / widths[i]);
        }
        v
    })
}
