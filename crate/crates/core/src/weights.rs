//! The t-independent Carleman weight Φ(x) = exp(λ ψ(x)^{−μ}).
//!
//! ψ is the paraboloid level function from [`crate::geometry`]; λ ≥ 1 is the
//! large parameter and μ ≥ 1 the shape exponent (default 2 in experiments).
//! Because Φ spans hundreds of orders of magnitude for large λ, every consumer
//! that forms products or ratios works with ln Φ = λψ^{−μ} and normalizes
//! before exponentiating; direct evaluation reports overflow explicitly
//! instead of returning `inf`.
//!
//! The derivative bundle exposes the closed forms used by the chain rule on
//! w = uΦ:
//!
//! ```text
//!     ∂_k ln Φ   = −λμ ψ^{−μ−1} ψ_k
//!     ∂_kj ln Φ  =  λμ(μ+1) ψ^{−μ−2} ψ_k ψ_j − λμ ψ^{−μ−1} ψ_kj
//! ```
//!
//! so that w-derivatives are Φ·(algebra on finite differences of u) and the
//! weight itself is never differenced numerically.

use crate::error::{Error, Result};
use crate::geometry::{self, Domain};
use crate::scalar::Scalar;

/// Carleman weight parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarlemanWeight<S> {
    /// Large parameter λ ≥ 1.
    pub lambda: S,
    /// Shape exponent μ ≥ 1.
    pub mu: S,
}

/// Closed-form weight derivatives at a point.
#[derive(Debug, Clone)]
pub struct WeightDerivs<S> {
    /// ψ(x).
    pub psi: S,
    /// ∇ψ = (1, x₂, …, x_n).
    pub grad_psi: Vec<S>,
    /// ∇ ln Φ = −λμ ψ^{−μ−1} ∇ψ.
    pub grad_log_phi: Vec<S>,
    /// λμ ψ^{−μ−1} (first-order chain coefficient).
    pub c1: S,
    /// λμ(μ+1) ψ^{−μ−2} (second-order chain coefficient).
    pub c2: S,
}

impl<S: Scalar> WeightDerivs<S> {
    /// Hessian entry ψ_kj (diag(0, 1, …, 1)).
    #[inline]
    pub fn psi_hess(&self, k: usize, j: usize) -> S {
        if k == j {
            geometry::level_hessian_diag(k)
        } else {
            S::zero()
        }
    }

    /// Hessian entry ∂_k∂_j ln Φ.
    #[inline]
    pub fn log_phi_hess(&self, k: usize, j: usize) -> S {
        self.c2 * self.grad_psi[k] * self.grad_psi[j] - self.c1 * self.psi_hess(k, j)
    }
}

/// Extrema of Φ² over a domain closure, reported in log space
/// (ln of max Φ², ln of min Φ²) alongside the ψ values attaining them.
#[derive(Debug, Clone, Copy)]
pub struct WeightExtrema<S> {
    pub log_max_sq: S,
    pub log_min_sq: S,
    pub psi_at_max: S,
    pub psi_at_min: S,
}

impl<S: Scalar> CarlemanWeight<S> {
    /// Validate λ ≥ 1, μ ≥ 1.
    pub fn new(lambda: S, mu: S) -> Result<Self> {
        if !(lambda >= S::one() && mu >= S::one()) {
            return Err(Error::WeightParams {
                lambda: lambda.to_f64().unwrap_or(f64::NAN),
                mu: mu.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self { lambda, mu })
    }

    /// ln Φ(x) = λ ψ(x)^{−μ}; errs where ψ ≤ 0.
    pub fn log_value(&self, x: &[S]) -> Result<S> {
        let psi = geometry::level(x);
        if psi <= S::zero() {
            return Err(Error::WeightDomain {
                psi: psi.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(self.lambda * psi.powf(-self.mu))
    }

    /// ln Φ² = 2λψ^{−μ} at a given ψ value.
    #[inline]
    pub fn log_sq_at_level(&self, psi: S) -> S {
        S::lit(2.0) * self.lambda * psi.powf(-self.mu)
    }

    /// Φ(x); errs on ψ ≤ 0, and reports overflow (with the log value to use
    /// instead) when the result exceeds the finite range.
    pub fn value(&self, x: &[S]) -> Result<S> {
        let lv = self.log_value(x)?;
        if lv > S::max_value().ln() {
            return Err(Error::WeightOverflow {
                log_value: lv.to_f64().unwrap_or(f64::INFINITY),
            });
        }
        Ok(lv.exp())
    }

    /// Φ²(x) with the same overflow contract as [`Self::value`].
    pub fn sq(&self, x: &[S]) -> Result<S> {
        let lv = self.log_value(x)? * S::lit(2.0);
        if lv > S::max_value().ln() {
            return Err(Error::WeightOverflow {
                log_value: lv.to_f64().unwrap_or(f64::INFINITY),
            });
        }
        Ok(lv.exp())
    }

    /// Closed-form derivative bundle at x.
    pub fn derivs(&self, x: &[S]) -> Result<WeightDerivs<S>> {
        let psi = geometry::level(x);
        if psi <= S::zero() {
            return Err(Error::WeightDomain {
                psi: psi.to_f64().unwrap_or(f64::NAN),
            });
        }
        let n = x.len();
        let mut grad_psi = vec![S::zero(); n];
        geometry::level_gradient(x, &mut grad_psi);
        let lm = self.lambda * self.mu;
        let c1 = lm * psi.powf(-self.mu - S::one());
        let c2 = lm * (self.mu + S::one()) * psi.powf(-self.mu - S::lit(2.0));
        let grad_log_phi: Vec<S> = grad_psi.iter().map(|&g| -c1 * g).collect();
        Ok(WeightDerivs { psi, grad_psi, grad_log_phi, c1, c2 })
    }

    /// Extrema of Φ² over the domain closure. Φ decreases in ψ, so the max
    /// sits at the smallest attainable ψ and the min at the largest; the
    /// prism attains its ψ-max 5/8 at its far corners (1/2 in 1-D).
    pub fn extrema_sq(&self, domain: &Domain<S>) -> WeightExtrema<S> {
        let psi_lo = domain.level_inf();
        let psi_hi = domain.level_sup();
        WeightExtrema {
            log_max_sq: self.log_sq_at_level(psi_lo),
            log_min_sq: self.log_sq_at_level(psi_hi),
            psi_at_max: psi_lo,
            psi_at_min: psi_hi,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w11() -> CarlemanWeight<f64> {
        CarlemanWeight::new(1.0, 1.0).unwrap()
    }

    #[test]
    fn parameter_floor_is_enforced() {
        assert!(CarlemanWeight::new(0.5, 1.0).is_err());
        assert!(CarlemanWeight::new(1.0, 0.99).is_err());
        assert!(CarlemanWeight::new(1.0, 1.0).is_ok());
    }

    #[test]
    fn boundary_and_origin_values_match_hand_computation() {
        let w = w11();
        // ψ = 3/4 at (1/2, 0): Φ = e^{4/3} ≈ 3.79367.
        let v = w.value(&[0.5, 0.0]).unwrap();
        assert!((v - (4.0f64 / 3.0).exp()).abs() < 1e-12);
        assert!((v - 3.793667).abs() < 1e-5);
        // ψ = 1/4 at the origin: Φ = e⁴ ≈ 54.60.
        let v0 = w.value(&[0.0, 0.0]).unwrap();
        assert!((v0 - 4.0f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn extrema_on_the_paraboloid_slab() {
        let w = w11();
        let d = Domain::paraboloid(2).unwrap();
        let e = w.extrema_sq(&d);
        // max Φ² = e⁸ at ψ = 1/4; min Φ² = e^{8/3} at ψ = 3/4.
        assert!((e.log_max_sq - 8.0).abs() < 1e-14);
        assert!((e.log_min_sq - 8.0 / 3.0).abs() < 1e-14);
        assert_eq!(e.psi_at_max, 0.25);
        assert_eq!(e.psi_at_min, 0.75);
    }

    #[test]
    fn prism_minimum_sits_at_the_far_corner_level() {
        let w = w11();
        for dim in 2..=3usize {
            let d = Domain::prism(dim).unwrap();
            let e = w.extrema_sq(&d);
            // Corner level 5/8 regardless of n ≥ 2: ln min Φ² = 2·(5/8)^{−1}.
            assert!((e.psi_at_min - 0.625).abs() < 1e-15, "dim {dim}");
            assert!((e.log_min_sq - 2.0 / 0.625).abs() < 1e-14);
        }
        let d1 = Domain::prism(1).unwrap();
        assert_eq!(w.extrema_sq(&d1).psi_at_min, 0.5);
    }

    #[test]
    fn eps_slab_minimum_matches_its_level_cap() {
        let w = w11();
        let d = Domain::paraboloid_eps(2, 0.1).unwrap();
        let e = w.extrema_sq(&d);
        assert!((e.log_min_sq - 2.0 / 0.65).abs() < 1e-14);
    }

    #[test]
    fn grid_minimum_dominates_the_outer_level_value() {
        // min over any Ḡ_ε grid of Φ² must exceed exp(2λ(3/4)^{−μ}).
        let w = CarlemanWeight::new(2.0, 2.0).unwrap();
        for &eps in &[0.05, 0.1, 0.3] {
            let d = Domain::paraboloid_eps(2, eps).unwrap();
            let g = crate::geometry::SpaceTimeGrid::build(d, 17, 1.0, 3).unwrap();
            let floor = w.log_sq_at_level(0.75);
            for &idx in g.active_nodes() {
                let x = g.node_coords(idx);
                let lv = 2.0 * w.log_value(&x).unwrap();
                assert!(lv > floor, "node {x:?} under the outer-level floor");
            }
        }
    }

    #[test]
    fn gradient_of_log_weight_at_origin() {
        let w = w11();
        let d = w.derivs(&[0.0, 0.0]).unwrap();
        // −λμ ψ^{−μ−1} ∇ψ at ψ = 1/4, ∇ψ = (1, 0): (−16, 0).
        assert!((d.grad_log_phi[0] + 16.0).abs() < 1e-12);
        assert_eq!(d.grad_log_phi[1], 0.0);
        assert_eq!(d.psi_hess(0, 0), 0.0);
        assert_eq!(d.psi_hess(1, 1), 1.0);
        assert_eq!(d.psi_hess(0, 1), 0.0);
    }

    #[test]
    fn closed_form_gradient_matches_numerical_differentiation_at_order_two() {
        let w = CarlemanWeight::new(3.0, 2.0).unwrap();
        let x = [0.2, 0.3];
        let exact = w.derivs(&x).unwrap().grad_log_phi[1];
        let fd = |h: f64| {
            let mut xp = x;
            let mut xm = x;
            xp[1] += h;
            xm[1] -= h;
            (w.log_value(&xp).unwrap() - w.log_value(&xm).unwrap()) / (2.0 * h)
        };
        let e1 = (fd(1e-2) - exact).abs();
        let e2 = (fd(5e-3) - exact).abs();
        let e3 = (fd(2.5e-3) - exact).abs();
        assert!(e1 / e2 > 3.4 && e1 / e2 < 4.6, "ratio {}", e1 / e2);
        assert!(e2 / e3 > 3.4 && e2 / e3 < 4.6, "ratio {}", e2 / e3);
    }

    #[test]
    fn log_hessian_matches_numerical_differentiation() {
        let w = CarlemanWeight::<f64>::new(2.0, 2.0).unwrap();
        let x = [0.15f64, 0.25];
        let d = w.derivs(&x).unwrap();
        let h = 1e-4;
        for k in 0..2 {
            for j in 0..2 {
                let mut xpp = x;
                let mut xpm = x;
                let mut xmp = x;
                let mut xmm = x;
                xpp[k] += h;
                xpp[j] += h;
                xpm[k] += h;
                xpm[j] -= h;
                xmp[k] -= h;
                xmp[j] += h;
                xmm[k] -= h;
                xmm[j] -= h;
                let fd = (w.log_value(&xpp).unwrap() - w.log_value(&xpm).unwrap()
                    - w.log_value(&xmp).unwrap()
                    + w.log_value(&xmm).unwrap())
                    / (4.0 * h * h);
                assert!(
                    (fd - d.log_phi_hess(k, j)).abs() < 1e-4 * (1.0 + fd.abs()),
                    "hessian ({k},{j}): fd {fd} vs closed {}",
                    d.log_phi_hess(k, j)
                );
            }
        }
    }

    #[test]
    fn overflow_is_reported_with_log_fallback() {
        let w = CarlemanWeight::<f64>::new(64.0, 2.0).unwrap();
        // ln Φ = 64·16 = 1024 > ln f64::MAX ≈ 709.8.
        let err = w.value(&[0.0, 0.0]).unwrap_err();
        match err {
            Error::WeightOverflow { log_value } => assert!((log_value - 1024.0).abs() < 1e-9),
            e => panic!("expected overflow, got {e}"),
        }
        // The log value itself stays available.
        assert!((w.log_value(&[0.0, 0.0]).unwrap() - 1024.0).abs() < 1e-9);
    }

    #[test]
    fn nonpositive_level_is_a_domain_error() {
        let w = w11();
        assert!(matches!(
            w.value(&[-0.5, 0.0]).unwrap_err(),
            Error::WeightDomain { .. }
        ));
    }

    #[test]
    fn f32_lane_evaluates_and_overflows_earlier() {
        let w = CarlemanWeight::<f32>::new(2.0, 2.0).unwrap();
        let v = w.value(&[0.25, 0.0]).unwrap();
        assert!(v.is_finite() && v > 1.0);
        // ln Φ = 20·16 = 320 > ln f32::MAX ≈ 88.7: overflow in the f32 lane.
        let w2 = CarlemanWeight::<f32>::new(20.0, 2.0).unwrap();
        assert!(matches!(
            w2.value(&[0.0, 0.0]),
            Err(Error::WeightOverflow { .. })
        ));
    }

    proptest! {
        /// Φ is strictly decreasing in ψ across the admissible band.
        #[test]
        fn weight_is_monotone_in_the_level(
            lambda in 1.0f64..8.0,
            mu in 1.0f64..3.0,
            p1 in 0.26f64..0.74,
            p2 in 0.26f64..0.74,
        ) {
            prop_assume!((p1 - p2).abs() > 1e-9);
            let w = CarlemanWeight::new(lambda, mu).unwrap();
            // Points on the x₁ axis realize ψ = x₁ + 1/4 directly.
            let a = w.log_value(&[p1 - 0.25]).unwrap();
            let b = w.log_value(&[p2 - 0.25]).unwrap();
            if p1 < p2 {
                prop_assert!(a > b);
            } else {
                prop_assert!(a < b);
            }
        }
    }
}
