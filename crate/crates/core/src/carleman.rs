//! Weighted-energy machinery for the parabolic operator: decomposition of the
//! conjugated operator into graded terms, slice-local energy densities,
//! divergence-form flux bookkeeping, a step-by-step verification of the
//! underlying pointwise identities, and the integrated estimate with its
//! parameter sweep.
//!
//! Everything here works on a [`Field`] sampled over a [`SpaceTimeGrid`],
//! with derivatives of the conjugated field `w = u * Phi` computed by the
//! chain rule: finite differences act on `u` only, while every derivative of
//! the weight `Phi = exp(lambda * psi^{-mu})` is evaluated analytically.
//! Differencing `Phi` itself would lose all accuracy at large `lambda`.

use std::sync::Arc;

use crate::diff;
use crate::error::{Error, Result};
use crate::field::{Field, SpatialField};
use crate::geometry::SpaceTimeGrid;
use crate::operators::EllipticCoefficients;
use crate::scalar::Scalar;
use crate::weights::CarlemanWeight;

/// Natural-log threshold beyond which `exp` overflows an `f64`.
const LOG_OVERFLOW: f64 = 700.0;

// ---------------------------------------------------------------------------
// Per-node tabulation of weight data and coefficient contractions.
// ---------------------------------------------------------------------------

/// Cached per-node values of the level function, the log-weight derivatives,
/// and the coefficient contractions that recur throughout the module.
struct WeightTable<S> {
    dim: usize,
    /// Level function value `psi`.
    psi: Vec<S>,
    /// `log Phi = lambda * psi^{-mu}`.
    log_phi: Vec<S>,
    /// Gradient of the level function, laid out `[node*dim + i]`.
    grad_psi: Vec<S>,
    /// Gradient of `log Phi`, laid out `[node*dim + i]`.
    gl: Vec<S>,
    /// Hessian of `log Phi`, laid out `[node*dim*dim + i*dim + j]`.
    glh: Vec<S>,
    /// Contraction `sum_{k,s} a^{ks} [psi_k psi_s (1 - (1 + 1/mu)/lambda * psi^mu)
    ///   + psi^{mu+1} psi_ks / (lambda mu)]`.
    kappa: Vec<S>,
    /// `sum_s a^{ms} psi_s`, laid out `[node*dim + m]`.
    a_grad_psi: Vec<S>,
}

impl<S: Scalar> WeightTable<S> {
    fn build(co: &EllipticCoefficients<S>, cw: &CarlemanWeight<S>) -> Result<Self> {
        let grid = co.grid();
        let d = grid.dim();
        let n = grid.n_nodes();
        let lam = cw.lambda;
        let mu = cw.mu;

        let mut psi = Vec::with_capacity(n);
        let mut log_phi = Vec::with_capacity(n);
        let mut grad_psi = Vec::with_capacity(n * d);
        let mut gl = Vec::with_capacity(n * d);
        let mut glh = Vec::with_capacity(n * d * d);
        let mut kappa = Vec::with_capacity(n);
        let mut a_grad_psi = Vec::with_capacity(n * d);

        let mut x = vec![S::zero(); d];
        for node in 0..n {
            grid.node_coords_into(node, &mut x);
            let wd = cw.derivs(&x)?;
            psi.push(wd.psi);
            log_phi.push(lam * wd.psi.powf(-mu));
            for i in 0..d {
                grad_psi.push(wd.grad_psi[i]);
                gl.push(wd.grad_log_phi[i]);
            }
            for i in 0..d {
                for j in 0..d {
                    glh.push(wd.log_phi_hess(i, j));
                }
            }
            let decay = S::one() - (S::one() + mu.recip()) / lam * wd.psi.powf(mu);
            let hess_scale = wd.psi.powf(mu + S::one()) / (lam * mu);
            let mut k = S::zero();
            for kk in 0..d {
                for s in 0..d {
                    k += co.a_at(node, kk, s)
                        * (wd.grad_psi[kk] * wd.grad_psi[s] * decay
                            + hess_scale * wd.psi_hess(kk, s));
                }
            }
            kappa.push(k);
            for m in 0..d {
                let mut v = S::zero();
                for s in 0..d {
                    v += co.a_at(node, m, s) * wd.grad_psi[s];
                }
                a_grad_psi.push(v);
            }
        }

        Ok(WeightTable {
            dim: d,
            psi,
            log_phi,
            grad_psi,
            gl,
            glh,
            kappa,
            a_grad_psi,
        })
    }

    #[inline]
    fn gl_at(&self, node: usize, i: usize) -> S {
        self.gl[node * self.dim + i]
    }

    #[inline]
    fn glh_at(&self, node: usize, i: usize, j: usize) -> S {
        self.glh[node * self.dim * self.dim + i * self.dim + j]
    }

    #[inline]
    fn grad_psi_at(&self, node: usize, i: usize) -> S {
        self.grad_psi[node * self.dim + i]
    }

    #[inline]
    fn a_grad_psi_at(&self, node: usize, m: usize) -> S {
        self.a_grad_psi[node * self.dim + m]
    }

    /// Largest `log Phi` over all nodes.
    fn max_log_phi(&self) -> S {
        self.log_phi
            .iter()
            .fold(S::neg_infinity(), |m, &v| m.max(v))
    }

    /// Errors out when `powers * log Phi` would overflow `exp`.
    fn guard(&self, powers: S) -> Result<()> {
        let worst = self.max_log_phi() * powers;
        if worst.to_f64().unwrap_or(f64::INFINITY) > LOG_OVERFLOW {
            return Err(Error::WeightOverflow {
                log_value: worst.to_f64().unwrap_or(f64::INFINITY),
            });
        }
        Ok(())
    }
}

fn check_same_grid<S: Scalar>(
    u: &Field<S>,
    co: &EllipticCoefficients<S>,
) -> Result<Arc<SpaceTimeGrid<S>>> {
    let g = u.grid();
    let gc = co.grid();
    if !Arc::ptr_eq(g, gc)
        && (g.dim() != gc.dim() || g.shape() != gc.shape() || g.nt() != gc.nt())
    {
        return Err(Error::Precondition(
            "field and coefficients live on different grids".into(),
        ));
    }
    Ok(Arc::clone(g))
}

/// Canonical table of second-derivative fields: entry `(i, j)` with `i <= j`
/// holds the mixed difference with the outer stencil along `i`; the mirror
/// entry aliases it, so the table is exactly symmetric.
fn second_derivative_table<S: Scalar>(u: &Field<S>, d: usize) -> Vec<Vec<Field<S>>> {
    let mut rows: Vec<Vec<Field<S>>> = Vec::with_capacity(d);
    for i in 0..d {
        let mut row = Vec::with_capacity(d);
        for j in 0..d {
            if i <= j {
                row.push(diff::field_deriv2(u, i, j));
            } else {
                row.push(rows[j][i].clone());
            }
        }
        rows.push(row);
    }
    rows
}

// ---------------------------------------------------------------------------
// Graded decomposition of the conjugated operator.
// ---------------------------------------------------------------------------

/// The four graded terms of the conjugated parabolic operator applied to
/// `w = u * Phi`, together with `w` itself.
///
/// Their sum reproduces `(u_t - L0 u) * Phi` exactly in exact arithmetic
/// (and to rounding when the same difference stencils are used on both
/// sides): the chain-rule cross terms cancel algebraically.
#[derive(Debug, Clone)]
pub struct CarlemanTerms<S> {
    /// Time derivative `w_t`.
    pub s1: Field<S>,
    /// Principal part `-sum a^{ij} w_ij`.
    pub s2: Field<S>,
    /// First-order weight coupling (linear in `grad w`, one weight gradient).
    pub s3: Field<S>,
    /// Zero-order weight coupling (linear in `w`, two weight gradients).
    pub s4: Field<S>,
    /// Conjugated field `w = u * Phi`.
    pub w: Field<S>,
}

impl<S: Scalar> CarlemanTerms<S> {
    /// Pointwise sum `s1 + s2 + s3 + s4`.
    pub fn sum(&self) -> Field<S> {
        let mut out = self.s1.clone();
        let vals = out.values_mut();
        for (k, v) in vals.iter_mut().enumerate() {
            *v += self.s2.values()[k] + self.s3.values()[k] + self.s4.values()[k];
        }
        out
    }
}

/// Splits the conjugated operator applied to `w = u * Phi` into its four
/// graded terms. Derivatives of `w` are assembled by the chain rule from
/// finite differences of `u` and analytic weight derivatives.
///
/// Errors with a weight-overflow report when `Phi` itself exceeds the
/// floating-point range; the integrated estimate handles that regime through
/// its normalized log-space path.
pub fn decompose<S: Scalar>(
    u: &Field<S>,
    co: &EllipticCoefficients<S>,
    cw: &CarlemanWeight<S>,
) -> Result<CarlemanTerms<S>> {
    let grid = check_same_grid(u, co)?;
    let table = WeightTable::build(co, cw)?;
    table.guard(S::one())?;

    let d = grid.dim();
    let n = grid.n_nodes();
    let nt = grid.nt();
    let lam = cw.lambda;
    let mu = cw.mu;

    let ut = diff::time_d1(u);
    let du: Vec<Field<S>> = (0..d).map(|i| diff::field_d1(u, i)).collect();
    let d2 = second_derivative_table(u, d);

    let mut s1 = Field::zeros(Arc::clone(&grid));
    let mut s2 = Field::zeros(Arc::clone(&grid));
    let mut s3 = Field::zeros(Arc::clone(&grid));
    let mut s4 = Field::zeros(Arc::clone(&grid));
    let mut w = Field::zeros(Arc::clone(&grid));

    let mut wi_hat = vec![S::zero(); d];
    for m in 0..nt {
        for node in 0..n {
            let phi = table.log_phi[node].exp();
            let uv = u.at(node, m);
            let psi = table.psi[node];

            for i in 0..d {
                wi_hat[i] = du[i].at(node, m) + table.gl_at(node, i) * uv;
            }

            s1.set(node, m, ut.at(node, m) * phi);

            let mut acc2 = S::zero();
            let mut acc3 = S::zero();
            let c1 = lam * mu * psi.powf(-mu - S::one());
            for i in 0..d {
                for j in 0..d {
                    let a = co.a_at(node, i, j);
                    let wij = d2[i][j].at(node, m)
                        + table.gl_at(node, i) * du[j].at(node, m)
                        + table.gl_at(node, j) * du[i].at(node, m)
                        + (table.gl_at(node, i) * table.gl_at(node, j)
                            + table.glh_at(node, i, j))
                            * uv;
                    acc2 -= a * wij;
                    acc3 -= a
                        * (table.grad_psi_at(node, j) * wi_hat[i]
                            + table.grad_psi_at(node, i) * wi_hat[j]);
                }
            }
            s2.set(node, m, acc2 * phi);
            s3.set(node, m, c1 * acc3 * phi);

            let zero_order = -lam * lam * mu * mu
                * psi.powf(-(mu + mu) - S::lit(2.0))
                * table.kappa[node];
            s4.set(node, m, zero_order * uv * phi);
            w.set(node, m, uv * phi);
        }
    }

    Ok(CarlemanTerms { s1, s2, s3, s4, w })
}

// ---------------------------------------------------------------------------
// Slice-local energy density.
// ---------------------------------------------------------------------------

/// Slice-local energy density evaluated on a single time level, shifted in
/// log space: every `Phi^2` is replaced by `exp(2 log Phi - log_shift)`.
fn v_density_shifted<S: Scalar>(
    u: &Field<S>,
    co: &EllipticCoefficients<S>,
    cw: &CarlemanWeight<S>,
    table: &WeightTable<S>,
    level: usize,
    log_shift: S,
) -> Result<SpatialField<S>> {
    let grid = check_same_grid(u, co)?;
    if level >= grid.nt() {
        return Err(Error::Precondition(format!(
            "time level {level} out of range (nt = {})",
            grid.nt()
        )));
    }
    let d = grid.dim();
    let lam = cw.lambda;
    let mu = cw.mu;
    let grad_weight = (S::lit(4.0).powf(mu + mu + S::lit(2.0)) * lam * mu).recip();

    let slice = u.slice(level);
    let grad = diff::gradient(&slice);

    let mut out = SpatialField::zeros(Arc::clone(&grid));
    let mut wi = vec![S::zero(); d];
    for node in 0..grid.n_nodes() {
        let phi2 = (table.log_phi[node] + table.log_phi[node] - log_shift).exp();
        let uv = slice.at(node);
        let psi = table.psi[node];

        for i in 0..d {
            wi[i] = grad[i].at(node) + table.gl_at(node, i) * uv;
        }

        let mut grad_form = S::zero();
        let mut plain_grad_form = S::zero();
        for i in 0..d {
            for j in 0..d {
                let a = co.a_at(node, i, j);
                grad_form += a * wi[i] * wi[j];
                plain_grad_form += a * grad[i].at(node) * grad[j].at(node);
            }
        }

        let half = S::lit(0.5);
        let v = half * psi.powf(mu + S::lit(2.0)) * grad_form
            - half * lam * lam * mu * mu * psi.powf(-mu) * table.kappa[node] * uv * uv
            + half * lam * mu * uv * uv
            + grad_weight * plain_grad_form;
        out.set(node, v * phi2);
    }
    Ok(out)
}

/// Evaluates the slice-local energy density on one time level. The result
/// depends only on that level's values: it is assembled from the slice and
/// its spatial differences alone.
pub fn v_density<S: Scalar>(
    u: &Field<S>,
    co: &EllipticCoefficients<S>,
    cw: &CarlemanWeight<S>,
    level: usize,
) -> Result<SpatialField<S>> {
    let table = WeightTable::build(co, cw)?;
    table.guard(S::lit(2.0))?;
    v_density_shifted(u, co, cw, &table, level, S::zero())
}

// ---------------------------------------------------------------------------
// Divergence-form flux bookkeeping.
// ---------------------------------------------------------------------------

/// Spatial flux of the divergence-form remainder: one component per axis plus
/// their assembled discrete divergence.
#[derive(Debug, Clone)]
pub struct FluxBundle<S> {
    /// Flux component along each spatial axis.
    pub components: Vec<Field<S>>,
    /// `sum_m D_m(components[m])` with the grid's difference stencils.
    pub divergence: Field<S>,
}

/// Raw flux pieces used both by the assembled bundle and by the identity
/// rows: `raw[p][m]` is piece `p`'s component along axis `m`.
fn flux_pieces_shifted<S: Scalar>(
    u: &Field<S>,
    co: &EllipticCoefficients<S>,
    cw: &CarlemanWeight<S>,
    table: &WeightTable<S>,
    log_shift: S,
) -> Result<Vec<Vec<Field<S>>>> {
    let grid = check_same_grid(u, co)?;
    let d = grid.dim();
    let n = grid.n_nodes();
    let nt = grid.nt();
    let lam = cw.lambda;
    let mu = cw.mu;

    let ut = diff::time_d1(u);
    let du: Vec<Field<S>> = (0..d).map(|i| diff::field_d1(u, i)).collect();
    let d2 = second_derivative_table(u, d);

    let mut pieces: Vec<Vec<Field<S>>> = (0..6)
        .map(|_| (0..d).map(|_| Field::zeros(Arc::clone(&grid))).collect())
        .collect();

    let mut wi_hat = vec![S::zero(); d];
    let mut b_w = vec![S::zero(); d];
    let mut b_u = vec![S::zero(); d];
    let mut m_s = vec![S::zero(); d];
    for m in 0..nt {
        for node in 0..n {
            let phi2 = (table.log_phi[node] + table.log_phi[node] - log_shift).exp();
            let uv = u.at(node, m);
            let utv = ut.at(node, m);
            let psi = table.psi[node];

            for i in 0..d {
                wi_hat[i] = du[i].at(node, m) + table.gl_at(node, i) * uv;
            }
            for mm in 0..d {
                let mut bw = S::zero();
                let mut bu = S::zero();
                for i in 0..d {
                    let a = co.a_at(node, mm, i);
                    bw += a * wi_hat[i];
                    bu += a * du[i].at(node, m);
                }
                b_w[mm] = bw;
                b_u[mm] = bu;
            }
            let mut e_w = S::zero();
            for k in 0..d {
                e_w += table.a_grad_psi_at(node, k) * wi_hat[k];
            }
            let mut q_w = S::zero();
            let mut l0u = S::zero();
            for i in 0..d {
                for j in 0..d {
                    let a = co.a_at(node, i, j);
                    q_w += a * wi_hat[i] * wi_hat[j];
                    l0u += a * d2[i][j].at(node, m);
                }
            }
            for s in 0..d {
                let mut acc = S::zero();
                for i in 0..d {
                    for j in 0..d {
                        acc += co.a_at(node, i, j) * du[i].at(node, m) * d2[s][j].at(node, m);
                    }
                }
                m_s[s] = acc;
            }

            let lm = lam * mu;
            let lm3 = lam * lam * lam * mu * mu * mu;
            let two = S::lit(2.0);
            for mm in 0..d {
                // time-gradient pairing flux
                let f1 = -two * psi.powf(mu + S::lit(2.0)) * utv * b_w[mm] * phi2;
                // gradient-coupling flux
                let f2 = two
                    * lm
                    * psi
                    * (two * e_w * b_w[mm] - q_w * table.a_grad_psi_at(node, mm))
                    * phi2;
                // zero-order coupling flux
                let f3 = two
                    * lm3
                    * psi.powf(-(mu + mu) - S::one())
                    * table.kappa[node]
                    * table.a_grad_psi_at(node, mm)
                    * uv
                    * uv
                    * phi2;
                // lower-order balance flux
                let f4 = -b_u[mm] * uv * phi2;
                // time-cross flux
                let f5 = -two * utv * b_u[mm] * phi2;
                // principal-square flux
                let mut sum_ms = S::zero();
                for s in 0..d {
                    sum_ms += co.a_at(node, mm, s) * m_s[s];
                }
                let f6 = (b_u[mm] * l0u - sum_ms) * phi2;

                pieces[0][mm].set(node, m, f1);
                pieces[1][mm].set(node, m, f2);
                pieces[2][mm].set(node, m, f3);
                pieces[3][mm].set(node, m, f4);
                pieces[4][mm].set(node, m, f5);
                pieces[5][mm].set(node, m, f6);
            }
        }
    }
    Ok(pieces)
}

/// Combines the raw flux pieces with the weights used by the assembled
/// estimate and returns per-axis components plus their discrete divergence.
fn flux_bundle_shifted<S: Scalar>(
    u: &Field<S>,
    co: &EllipticCoefficients<S>,
    cw: &CarlemanWeight<S>,
    table: &WeightTable<S>,
    log_shift: S,
) -> Result<FluxBundle<S>> {
    let grid = check_same_grid(u, co)?;
    let d = grid.dim();
    let lam = cw.lambda;
    let mu = cw.mu;
    let half = S::lit(0.5);
    let lm = lam * mu;
    let small = (S::lit(4.0).powf(mu + mu + S::lit(2.0)) * lm).recip();

    let pieces = flux_pieces_shifted(u, co, cw, table, log_shift)?;
    let mut components = Vec::with_capacity(d);
    for mm in 0..d {
        let mut comp = Field::zeros(Arc::clone(&grid));
        let vals = comp.values_mut();
        for (k, v) in vals.iter_mut().enumerate() {
            *v = half
                * (pieces[0][mm].values()[k]
                    + pieces[1][mm].values()[k]
                    + pieces[2][mm].values()[k])
                + lm * pieces[3][mm].values()[k]
                + small * (pieces[4][mm].values()[k] + pieces[5][mm].values()[k]);
        }
        components.push(comp);
    }

    let mut divergence = Field::zeros(Arc::clone(&grid));
    for (mm, comp) in components.iter().enumerate() {
        let dcomp = diff::field_d1(comp, mm);
        let vals = divergence.values_mut();
        for (k, v) in vals.iter_mut().enumerate() {
            *v += dcomp.values()[k];
        }
    }

    Ok(FluxBundle {
        components,
        divergence,
    })
}

/// Assembles the full divergence-form flux of the estimate: per-axis
/// components and their discrete divergence.
pub fn flux_bundle<S: Scalar>(
    u: &Field<S>,
    co: &EllipticCoefficients<S>,
    cw: &CarlemanWeight<S>,
) -> Result<FluxBundle<S>> {
    let table = WeightTable::build(co, cw)?;
    table.guard(S::lit(2.0))?;
    flux_bundle_shifted(u, co, cw, &table, S::zero())
}

// ---------------------------------------------------------------------------
// Pairwise cancellation of the data-boundary normal flux.
// ---------------------------------------------------------------------------

/// Defect of the paired normal-flux entries on the data boundary.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryPairDefect<S> {
    /// Largest absolute value of the paired sum over boundary nodes/levels.
    pub defect: S,
    /// Largest absolute value of a single pair member (for relative bounds).
    pub scale: S,
}

/// Checks that the two normal-flux entries of the principal-square flux whose
/// outer and inner derivative axes both equal the normal direction cancel
/// pairwise on the `x1 = 0` boundary face.
///
/// The two entries carry the mixed second derivative with opposite
/// composition orders; since the one-dimensional difference stencils commute,
/// their sum must vanish to rounding, so no extra Cauchy data is needed to
/// evaluate the assembled flux through that face.
pub fn boundary_flux_pair<S: Scalar>(
    u: &Field<S>,
    co: &EllipticCoefficients<S>,
    cw: &CarlemanWeight<S>,
) -> Result<BoundaryPairDefect<S>> {
    let grid = check_same_grid(u, co)?;
    let table = WeightTable::build(co, cw)?;
    table.guard(S::lit(2.0))?;

    let d = grid.dim();
    let du: Vec<Field<S>> = (0..d).map(|i| diff::field_d1(u, i)).collect();
    // Outer stencil along the normal axis first, then the reverse order.
    let normal_outer: Vec<Field<S>> = (0..d)
        .map(|s| {
            if s == 0 {
                diff::field_deriv2(u, 0, 0)
            } else {
                diff::field_d1(&diff::field_d1(u, s), 0)
            }
        })
        .collect();
    let normal_inner: Vec<Field<S>> = (0..d)
        .map(|s| {
            if s == 0 {
                diff::field_deriv2(u, 0, 0)
            } else {
                diff::field_d1(&diff::field_d1(u, 0), s)
            }
        })
        .collect();

    let mut defect = S::zero();
    let mut scale = S::zero();
    for node in grid.gamma_nodes() {
        let phi2 = (table.log_phi[node] + table.log_phi[node]).exp();
        for m in 0..grid.nt() {
            let mut pair = S::zero();
            let mut first = S::zero();
            for i in 0..d {
                let ai0 = co.a_at(node, i, 0);
                if ai0 == S::zero() {
                    continue;
                }
                for s in 0..d {
                    let a0s = co.a_at(node, 0, s);
                    let fwd = normal_outer[s].at(node, m);
                    let rev = normal_inner[s].at(node, m);
                    pair += ai0 * a0s * du[i].at(node, m) * (fwd - rev);
                    first += ai0 * a0s * du[i].at(node, m) * fwd;
                }
            }
            defect = defect.max((pair * phi2).abs());
            scale = scale.max((first * phi2).abs());
        }
    }
    Ok(BoundaryPairDefect { defect, scale })
}

// ---------------------------------------------------------------------------
// Slice cancellation.
// ---------------------------------------------------------------------------

/// Relative defect between the integrated slice densities at the initial and
/// terminal levels, without any precondition on the input slices. Densities
/// are evaluated with weights normalized to unit maximum so the comparison is
/// stable for large `lambda`.
pub fn cancellation_defect_raw<S: Scalar>(
    w: &Field<S>,
    co: &EllipticCoefficients<S>,
    cw: &CarlemanWeight<S>,
) -> Result<S> {
    let grid = check_same_grid(w, co)?;
    let table = WeightTable::build(co, cw)?;
    let shift = table.max_log_phi() * S::lit(2.0);

    let last = grid.nt() - 1;
    let v0 = v_density_shifted(w, co, cw, &table, 0, shift)?;
    let vt = v_density_shifted(w, co, cw, &table, last, shift)?;

    let mut i0 = S::zero();
    let mut it = S::zero();
    for &node in grid.active_nodes() {
        let qw = grid.quad_weight(node);
        i0 += qw * v0.at(node);
        it += qw * vt.at(node);
    }
    Ok((it - i0).abs() / (i0.abs() + S::one()))
}

/// Verifies that the integrated slice density takes the same value on the
/// initial and terminal levels when those two slices agree.
///
/// Preconditions: the two slices must match to machine precision (a
/// mismatch is reported as an error carrying the observed defect). The
/// returned defect should then be at or below rounding level; any larger
/// value indicates the density is not slice-local.
pub fn check_cancellation<S: Scalar>(
    w: &Field<S>,
    co: &EllipticCoefficients<S>,
    cw: &CarlemanWeight<S>,
) -> Result<S> {
    let grid = check_same_grid(w, co)?;
    let last = grid.nt() - 1;
    let mut mismatch = S::zero();
    let mut scale = S::zero();
    for node in 0..grid.n_nodes() {
        let a = w.at(node, 0);
        let b = w.at(node, last);
        mismatch = mismatch.max((a - b).abs());
        scale = scale.max(a.abs()).max(b.abs());
    }
    if mismatch > S::lit(1e-12) * (scale + S::one()) {
        return Err(Error::SliceMismatch {
            defect: mismatch.to_f64().unwrap_or(f64::NAN),
        });
    }
    cancellation_defect_raw(w, co, cw)
}

// ---------------------------------------------------------------------------
// Integrated estimate.
// ---------------------------------------------------------------------------

/// One row of the integrated-estimate sweep: the weighted residual mass, the
/// graded energy it must dominate, their ratio, and the slice-cancellation
/// defect measured at the same weight parameters.
#[derive(Debug, Clone, Copy)]
pub struct EstimateReport<S> {
    /// Weight-strength parameter the row was evaluated at.
    pub lambda: S,
    /// `integral of (u_t - L0 u)^2 * Phi^2` (normalized weights).
    pub lhs_integral: S,
    /// `lambda^{-1} * (second-order energy) + lambda * (gradient energy)
    ///  + lambda^3 * (zero-order energy)`, same normalization.
    pub energy_bracket: S,
    /// `lhs_integral / energy_bracket`.
    pub margin_ratio: S,
    /// Slice-cancellation defect for a matched-slice companion field.
    pub cancellation_defect: S,
}

/// Dilates a spatial mask by one node along every axis (within the box).
fn dilate_mask<S: Scalar>(grid: &SpaceTimeGrid<S>, mask: &[bool]) -> Vec<bool> {
    let d = grid.dim();
    let shape = grid.shape();
    let mut out = mask.to_vec();
    for node in 0..grid.n_nodes() {
        if mask[node] {
            continue;
        }
        let mi = grid.multi_index(node);
        'axes: for k in 0..d {
            for step in [-1isize, 1] {
                let pos = mi[k] as isize + step;
                if pos < 0 || pos as usize >= shape[k] {
                    continue;
                }
                let mut nb = mi.clone();
                nb[k] = pos as usize;
                if mask[grid.linear_index(&nb)] {
                    out[node] = true;
                    break 'axes;
                }
            }
        }
    }
    out
}

/// Spatial nodes lying within `margin` index steps of the box faces or of an
/// inactive node; compact-support checks measure the field there.
fn boundary_ring<S: Scalar>(grid: &SpaceTimeGrid<S>, margin: usize) -> Vec<bool> {
    let d = grid.dim();
    let shape = grid.shape();
    let n = grid.n_nodes();
    let mut ring = vec![false; n];
    for node in 0..n {
        let mi = grid.multi_index(node);
        for k in 0..d {
            if mi[k] < margin || mi[k] + margin >= shape[k] {
                ring[node] = true;
            }
        }
    }
    // Near inactive (outside-domain) nodes: dilate their complement.
    let mut near_inactive: Vec<bool> = (0..n).map(|i| !grid.is_active(i)).collect();
    for _ in 0..margin {
        near_inactive = dilate_mask(grid, &near_inactive);
    }
    for node in 0..n {
        if near_inactive[node] && grid.is_active(node) {
            ring[node] = true;
        }
    }
    ring
}

/// Runs the integrated estimate for a fixed shape exponent `mu` across a
/// sweep of weight strengths `lambdas`, on a field that vanishes near the
/// lateral boundary and near both time ends.
///
/// All weighted integrals are evaluated in log space with the squared weight
/// normalized to unit maximum over a slightly dilated support of `u`; the
/// reported `margin_ratio` is invariant under that normalization. Rows are
/// computed sequentially with a fixed summation order, so repeated runs are
/// bit-identical.
pub fn integrated_estimate<S: Scalar>(
    u: &Field<S>,
    co: &EllipticCoefficients<S>,
    mu: S,
    lambdas: &[S],
) -> Result<Vec<EstimateReport<S>>> {
    let grid = check_same_grid(u, co)?;
    let d = grid.dim();
    let n = grid.n_nodes();
    let nt = grid.nt();

    let scale = u.linf();
    if scale == S::zero() {
        return Err(Error::ZeroField);
    }

    // Compact support: small on the boundary ring at all levels and
    // everywhere on the first and last two levels.
    let ring = boundary_ring(&grid, 2);
    let mut boundary_max = S::zero();
    for node in 0..n {
        if !grid.is_active(node) {
            continue;
        }
        if ring[node] {
            for m in 0..nt {
                boundary_max = boundary_max.max(u.at(node, m).abs());
            }
        }
        for m in [0, 1, nt - 2, nt - 1] {
            boundary_max = boundary_max.max(u.at(node, m).abs());
        }
    }
    if boundary_max > S::lit(1e-12) * scale {
        return Err(Error::NotCompactlySupported {
            boundary_max: boundary_max.to_f64().unwrap_or(f64::NAN),
            scale: scale.to_f64().unwrap_or(f64::NAN),
        });
    }

    // Spatial support of u, dilated enough to cover every difference stencil.
    let mut support = vec![false; n];
    for node in 0..n {
        for m in 0..nt {
            if u.at(node, m) != S::zero() {
                support[node] = true;
                break;
            }
        }
    }
    for _ in 0..3 {
        support = dilate_mask(&grid, &support);
    }
    let support_nodes: Vec<usize> = (0..n).filter(|&i| support[i]).collect();

    // Level-function powers, independent of lambda.
    let mut pim = vec![S::zero(); n];
    let mut x = vec![S::zero(); d];
    for &node in &support_nodes {
        grid.node_coords_into(node, &mut x);
        let psi = crate::geometry::level(&x);
        if psi <= S::zero() {
            return Err(Error::WeightDomain {
                psi: psi.to_f64().unwrap_or(f64::NAN),
            });
        }
        pim[node] = psi.powf(-mu);
    }
    let max_pim = support_nodes
        .iter()
        .fold(S::zero(), |mx, &i| mx.max(pim[i]));

    // Finite-difference fields, shared across the sweep.
    let ut = diff::time_d1(u);
    let du: Vec<Field<S>> = (0..d).map(|i| diff::field_d1(u, i)).collect();
    let d2 = second_derivative_table(u, d);

    // Matched-slice companion for the cancellation defect: the strongest
    // time slice, modulated so the first and last levels agree.
    let mut best_level = 0usize;
    let mut best_norm = S::neg_infinity();
    for m in 0..nt {
        let mut lv = S::zero();
        for v in u.level_values(m) {
            lv = lv.max(v.abs());
        }
        if lv > best_norm {
            best_norm = lv;
            best_level = m;
        }
    }
    let profile = u.slice(best_level);
    let mut companion = Field::zeros(Arc::clone(&grid));
    for m in 0..nt {
        let t = grid.time(m);
        let s = (S::PI() * t / grid.t_final()).sin();
        let factor = S::one() + s * s;
        for node in 0..n {
            companion.set(node, m, profile.at(node) * factor);
        }
    }

    let mut reports = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        let shift = (lam + lam) * max_pim;
        let mut lhs = S::zero();
        let mut e_second = S::zero();
        let mut e_grad = S::zero();
        let mut e_zero = S::zero();
        for m in 0..nt {
            let tw = grid.time_weight(m);
            for &node in &support_nodes {
                let qw = grid.quad_weight(node);
                if qw == S::zero() {
                    continue;
                }
                let q2 = ((lam + lam) * pim[node] - shift).exp();
                let wgt = tw * qw * q2;

                let utv = ut.at(node, m);
                let mut l0u = S::zero();
                let mut hess_sq = S::zero();
                for i in 0..d {
                    for j in 0..d {
                        let dij = d2[i][j].at(node, m);
                        l0u += co.a_at(node, i, j) * dij;
                        hess_sq += dij * dij;
                    }
                }
                let mut grad_sq = S::zero();
                for i in 0..d {
                    let g = du[i].at(node, m);
                    grad_sq += g * g;
                }
                let uv = u.at(node, m);

                let resid = utv - l0u;
                lhs += wgt * resid * resid;
                e_second += wgt * (utv * utv + hess_sq);
                e_grad += wgt * grad_sq;
                e_zero += wgt * uv * uv;
            }
        }
        let bracket = e_second / lam + lam * e_grad + lam * lam * lam * e_zero;
        let cw = CarlemanWeight::new(lam, mu)?;
        let defect = check_cancellation(&companion, co, &cw)?;
        reports.push(EstimateReport {
            lambda: lam,
            lhs_integral: lhs,
            energy_bracket: bracket,
            margin_ratio: lhs / bracket,
            cancellation_defect: defect,
        });
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Identity chain.
// ---------------------------------------------------------------------------

/// Kind of a verified step in the pointwise chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// Equality that must hold up to difference-stencil truncation.
    Exact,
    /// One-sided bound with an unspecified constant, fitted and reported.
    LowerBound,
    /// Pointwise non-negativity of a quadratic form.
    Positivity,
}

/// One verified step of the pointwise estimate chain.
#[derive(Debug, Clone)]
pub struct IdentityRow<S> {
    /// Content-derived name of the step.
    pub name: &'static str,
    /// What kind of statement the step makes.
    pub kind: RowKind,
    /// Exact rows: max |lhs - rhs| over the restricted node set.
    /// Bound rows: largest tolerance-adjusted violation (zero when it holds).
    pub residual: S,
    /// Magnitude reference for the residual.
    pub scale: S,
    /// Exact rows: residual / scale. Bound rows: the fitted constant.
    pub fitted_constant: S,
    /// Whether the step held on this grid.
    pub passed: bool,
}

/// Verification report for the pointwise estimate chain on one grid.
#[derive(Debug, Clone)]
pub struct IdentityReport<S> {
    /// One row per verified step, in derivation order.
    pub rows: Vec<IdentityRow<S>>,
    /// Largest spatial step of the grid.
    pub grid_h: S,
    /// Time step of the grid.
    pub grid_dt: S,
}

impl<S: Scalar> IdentityReport<S> {
    /// Row lookup by name.
    pub fn row(&self, name: &str) -> Option<&IdentityRow<S>> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// True when every row passed.
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

/// Restricted evaluation set: nodes at least a fixed physical fraction (and
/// at least two index steps) away from every box face, at time levels with
/// the same margin. Keeps the weight's dynamic range fixed under refinement
/// so residual ratios measure stencil order cleanly.
fn restricted_set<S: Scalar>(grid: &SpaceTimeGrid<S>) -> Result<(Vec<usize>, Vec<usize>)> {
    if !grid.domain().is_box() {
        return Err(Error::Precondition(
            "identity verification requires a box-shaped domain".into(),
        ));
    }
    let d = grid.dim();
    let shape = grid.shape();
    let nt = grid.nt();
    if nt < 7 {
        return Err(Error::TimeLevelsTooSmall { min: 7, got: nt });
    }
    // A fixed *fraction* of each axis (one quarter from either end, so the
    // central half remains) keeps the evaluation set geometrically similar
    // across refinements: halving h must not also move the set closer to the
    // steep-weight boundary, or measured convergence ratios pick up a
    // set-shift component on top of the stencil truncation.
    let mut margins = Vec::with_capacity(d);
    for k in 0..d {
        if shape[k] < 7 {
            return Err(Error::ResolutionTooSmall {
                min: 7,
                got: shape[k],
            });
        }
        margins.push(((shape[k] - 1) / 4).max(2));
    }
    let tmargin = ((nt - 1) / 4).max(2);

    let mut nodes = Vec::new();
    'outer: for node in 0..grid.n_nodes() {
        let mi = grid.multi_index(node);
        for k in 0..d {
            if mi[k] < margins[k] || mi[k] + margins[k] >= shape[k] {
                continue 'outer;
            }
        }
        nodes.push(node);
    }
    let levels: Vec<usize> = (tmargin..nt - tmargin).collect();
    if nodes.is_empty() || levels.is_empty() {
        return Err(Error::Precondition(
            "restricted evaluation set is empty; refine the grid".into(),
        ));
    }
    Ok((nodes, levels))
}

/// Scans `lhs - Σ parts` over the restricted set and produces an
/// exact-identity row.
///
/// The scale is the largest single term appearing in the identity, not just
/// the largest side: the divergence parts carry the squared weight, whose
/// magnitude can exceed the matched product by an order of magnitude, and
/// truncation error is relative to the terms being differenced, not to their
/// (cancelling) sum.
fn exact_row<S: Scalar>(
    name: &'static str,
    lhs: &Field<S>,
    parts: &[&Field<S>],
    nodes: &[usize],
    levels: &[usize],
    tol_factor: S,
) -> IdentityRow<S> {
    let mut residual = S::zero();
    let mut scale = S::zero();
    for &m in levels {
        for &node in nodes {
            let a = lhs.at(node, m);
            let mut b = S::zero();
            scale = scale.max(a.abs());
            for p in parts {
                let v = p.at(node, m);
                b += v;
                scale = scale.max(v.abs());
            }
            residual = residual.max((a - b).abs());
        }
    }
    let rel = if scale > S::zero() {
        residual / scale
    } else {
        S::zero()
    };
    IdentityRow {
        name,
        kind: RowKind::Exact,
        residual,
        scale,
        fitted_constant: rel,
        passed: residual <= tol_factor * scale + S::lit(1e-300),
    }
}

/// Scans a remainder that must stay above `-C * control - tol` and fits `C`.
///
/// The tolerance is uniform over the row — truncation error anywhere scales
/// with the row's global magnitude, not with the local integrand, so a
/// per-node tolerance would under-cover nodes where the integrand happens to
/// vanish while its neighborhood does not.
fn lower_bound_row<S: Scalar>(
    name: &'static str,
    remainder: &Field<S>,
    control: &Field<S>,
    local_scale: &Field<S>,
    nodes: &[usize],
    levels: &[usize],
    tol_factor: S,
) -> IdentityRow<S> {
    let mut global_scale = S::zero();
    let mut max_control = S::zero();
    for &m in levels {
        for &node in nodes {
            global_scale = global_scale.max(local_scale.at(node, m).abs());
            max_control = max_control.max(control.at(node, m));
        }
    }
    let tol = tol_factor * global_scale;
    let control_floor = max_control * S::lit(1e-14);
    let mut fitted = S::zero();
    let mut violation = S::zero();
    for &m in levels {
        for &node in nodes {
            let shortfall = -remainder.at(node, m) - tol;
            if shortfall <= S::zero() {
                continue;
            }
            let c = control.at(node, m);
            if c > control_floor {
                fitted = fitted.max(shortfall / c);
            } else {
                violation = violation.max(shortfall);
            }
        }
    }
    IdentityRow {
        name,
        kind: RowKind::LowerBound,
        residual: violation.max(S::zero()),
        scale: global_scale,
        fitted_constant: fitted,
        passed: violation <= S::zero(),
    }
}

/// Verifies the pointwise chain behind the integrated estimate on the grid of
/// `u`: the exact product identities hold to stencil truncation, each
/// one-sided bound holds with a finite fitted constant, and the quadratic
/// form in the principal-square step stays above its ellipticity floor.
pub fn identity_report<S: Scalar>(
    u: &Field<S>,
    co: &EllipticCoefficients<S>,
    cw: &CarlemanWeight<S>,
) -> Result<IdentityReport<S>> {
    let grid = check_same_grid(u, co)?;
    let (nodes, levels) = restricted_set(&grid)?;
    let table = WeightTable::build(co, cw)?;
    table.guard(S::lit(2.0))?;
    let nu = co.validate()?.nu_est;

    let d = grid.dim();
    let n = grid.n_nodes();
    let nt = grid.nt();
    let lam = cw.lambda;
    let mu = cw.mu;
    let lm = lam * mu;

    let h = grid.max_spacing();
    let dt = grid.dt();
    let tol_factor = S::lit(10.0) * (h * h + dt * dt);
    // The exact rows difference quantities carrying the squared weight, whose
    // spatial log-gradient is twice that of the weight itself; the leading
    // truncation term of a central stencil applied to exp(g·x)·smooth is
    // (g·h)²/6 relative, so the pass tolerance must grow with the resolved
    // weight steepness.  The weight is static in time, so the dt part needs
    // no amplification.
    let glmax = {
        let mut g = S::zero();
        for &node in &nodes {
            let mut sq = S::zero();
            for i in 0..grid.dim() {
                let gi = table.gl_at(node, i);
                sq += gi * gi;
            }
            g = g.max(sq.sqrt());
        }
        g
    };
    let exact_tol_factor =
        S::lit(10.0) * dt * dt + (S::lit(10.0) + S::lit(4.0) * glmax * glmax) * h * h;

    let terms = decompose(u, co, cw)?;
    let ut = diff::time_d1(u);
    let du: Vec<Field<S>> = (0..d).map(|i| diff::field_d1(u, i)).collect();
    let d2 = second_derivative_table(u, d);
    let pieces = flux_pieces_shifted(u, co, cw, &table, S::zero())?;

    let divergence_of = |piece: &[Field<S>]| -> Field<S> {
        let mut div = Field::zeros(Arc::clone(&grid));
        for (mm, comp) in piece.iter().enumerate() {
            let dcomp = diff::field_d1(comp, mm);
            let vals = div.values_mut();
            for (k, v) in vals.iter_mut().enumerate() {
                *v += dcomp.values()[k];
            }
        }
        div
    };

    // Shared per-node helper values.
    let phi2_at = |node: usize| (table.log_phi[node] + table.log_phi[node]).exp();

    // --- densities whose time derivative enters the exact rows ------------
    let mut grad_energy = Field::zeros(Arc::clone(&grid)); // sum a^{ij} w_i w_j * psi^{mu+2}
    let mut zero_density = Field::zeros(Arc::clone(&grid)); // -lam^2 mu^2 psi^{-mu} kappa w^2
    let mut half_sq = Field::zeros(Arc::clone(&grid)); // u^2 Phi^2 / 2
    let mut plain_grad_energy = Field::zeros(Arc::clone(&grid)); // sum a^{ij} u_i u_j Phi^2
    {
        let mut wi = vec![S::zero(); d];
        for m in 0..nt {
            for node in 0..n {
                let phi2 = phi2_at(node);
                let uv = u.at(node, m);
                let psi = table.psi[node];
                for i in 0..d {
                    wi[i] = du[i].at(node, m) + table.gl_at(node, i) * uv;
                }
                let mut wform = S::zero();
                let mut uform = S::zero();
                for i in 0..d {
                    for j in 0..d {
                        let a = co.a_at(node, i, j);
                        wform += a * wi[i] * wi[j];
                        uform += a * du[i].at(node, m) * du[j].at(node, m);
                    }
                }
                grad_energy.set(node, m, psi.powf(mu + S::lit(2.0)) * wform * phi2);
                zero_density.set(
                    node,
                    m,
                    -lam * lam * mu * mu * psi.powf(-mu) * table.kappa[node] * uv * uv * phi2,
                );
                half_sq.set(node, m, S::lit(0.5) * uv * uv * phi2);
                plain_grad_energy.set(node, m, uform * phi2);
            }
        }
    }

    let mut rows = Vec::new();

    // --- exact row: time-principal exchange -------------------------------
    {
        let dt_grad_energy = diff::time_d1(&grad_energy);
        let div1 = divergence_of(&pieces[0]);
        let mut lhs = Field::zeros(Arc::clone(&grid));
        let mut bulk = Field::zeros(Arc::clone(&grid));
        let mut wi = vec![S::zero(); d];
        for m in 0..nt {
            for node in 0..n {
                let psi = table.psi[node];
                let s1v = terms.s1.at(node, m);
                lhs.set(
                    node,
                    m,
                    S::lit(2.0) * s1v * terms.s2.at(node, m) * psi.powf(mu + S::lit(2.0)),
                );
                let phi = table.log_phi[node].exp();
                let uv = u.at(node, m);
                for i in 0..d {
                    wi[i] = (du[i].at(node, m) + table.gl_at(node, i) * uv) * phi;
                }
                let mut weight_pair = S::zero();
                let mut da_pair = S::zero();
                for i in 0..d {
                    for j in 0..d {
                        weight_pair += co.a_at(node, i, j)
                            * (table.grad_psi_at(node, j) * wi[i]
                                + table.grad_psi_at(node, i) * wi[j]);
                        da_pair += co.da_at(node, j, i, j) * wi[i]
                            + co.da_at(node, i, i, j) * wi[j];
                    }
                }
                let v = (mu + S::lit(2.0)) * psi.powf(mu + S::one()) * s1v * weight_pair
                    + psi.powf(mu + S::lit(2.0)) * s1v * da_pair;
                bulk.set(node, m, v);
            }
        }
        rows.push(exact_row(
            "time-principal-exchange",
            &lhs,
            &[&bulk, &dt_grad_energy, &div1],
            &nodes,
            &levels,
            exact_tol_factor,
        ));
    }

    // --- exact row: zero-order time pairing -------------------------------
    {
        let dt_zero = diff::time_d1(&zero_density);
        let mut lhs = Field::zeros(Arc::clone(&grid));
        for m in 0..nt {
            for node in 0..n {
                let psi = table.psi[node];
                lhs.set(
                    node,
                    m,
                    S::lit(2.0)
                        * terms.s1.at(node, m)
                        * terms.s4.at(node, m)
                        * psi.powf(mu + S::lit(2.0)),
                );
            }
        }
        rows.push(exact_row(
            "zero-order-time-pairing",
            &lhs,
            &[&dt_zero],
            &nodes,
            &levels,
            exact_tol_factor,
        ));
    }

    // --- exact row: lower-order balance ------------------------------------
    {
        let dt_half_sq = diff::time_d1(&half_sq);
        let div4 = divergence_of(&pieces[3]);
        let mut lhs = Field::zeros(Arc::clone(&grid));
        let mut bulk = Field::zeros(Arc::clone(&grid));
        for m in 0..nt {
            for node in 0..n {
                let phi2 = phi2_at(node);
                let uv = u.at(node, m);
                let mut l0u = S::zero();
                let mut uform = S::zero();
                let mut weight_term = S::zero();
                let mut da_term = S::zero();
                for i in 0..d {
                    for j in 0..d {
                        let a = co.a_at(node, i, j);
                        l0u += a * d2[i][j].at(node, m);
                        uform += a * du[i].at(node, m) * du[j].at(node, m);
                        weight_term += a * table.gl_at(node, j) * du[i].at(node, m);
                        da_term += co.da_at(node, j, i, j) * du[i].at(node, m);
                    }
                }
                lhs.set(node, m, (ut.at(node, m) - l0u) * uv * phi2);
                let v = uform * phi2
                    + S::lit(2.0) * weight_term * uv * phi2
                    + da_term * uv * phi2;
                bulk.set(node, m, v);
            }
        }
        rows.push(exact_row(
            "lower-order-balance",
            &lhs,
            &[&bulk, &dt_half_sq, &div4],
            &nodes,
            &levels,
            exact_tol_factor,
        ));
    }

    // --- bound row: gradient-coupling --------------------------------------
    {
        let div2 = divergence_of(&pieces[1]);
        let mut remainder = Field::zeros(Arc::clone(&grid));
        let mut control = Field::zeros(Arc::clone(&grid));
        let mut local_scale = Field::zeros(Arc::clone(&grid));
        for m in 0..nt {
            for node in 0..n {
                let psi = table.psi[node];
                let phi2 = phi2_at(node);
                let lhs = S::lit(2.0)
                    * terms.s2.at(node, m)
                    * terms.s3.at(node, m)
                    * psi.powf(mu + S::lit(2.0));
                let r = lhs - div2.at(node, m);
                let mut grad_sq = S::zero();
                for i in 0..d {
                    let g = du[i].at(node, m);
                    grad_sq += g * g;
                }
                let uv = u.at(node, m);
                let c = (lm * grad_sq + lm * lm * lm * uv * uv) * phi2;
                remainder.set(node, m, r);
                control.set(node, m, c);
                local_scale.set(node, m, lhs.abs() + div2.at(node, m).abs() + c);
            }
        }
        rows.push(lower_bound_row(
            "gradient-coupling-bound",
            &remainder,
            &control,
            &local_scale,
            &nodes,
            &levels,
            tol_factor,
        ));
    }

    // --- bound row: curvature sign ------------------------------------------
    {
        let div3 = divergence_of(&pieces[2]);
        let mut remainder = Field::zeros(Arc::clone(&grid));
        let mut control = Field::zeros(Arc::clone(&grid));
        let mut local_scale = Field::zeros(Arc::clone(&grid));
        for m in 0..nt {
            for node in 0..n {
                let psi = table.psi[node];
                let phi2 = phi2_at(node);
                let lhs = S::lit(2.0)
                    * terms.s3.at(node, m)
                    * terms.s4.at(node, m)
                    * psi.powf(mu + S::lit(2.0));
                let r = lhs - div3.at(node, m);
                let uv = u.at(node, m);
                // Sign-carrying comparison mass for the fitted floor.
                let c = lam * lam * lam * mu * mu * mu * mu
                    * psi.powf(-(mu + mu) - S::lit(2.0))
                    * uv
                    * uv
                    * phi2;
                remainder.set(node, m, r);
                control.set(node, m, c);
                local_scale.set(node, m, lhs.abs() + div3.at(node, m).abs() + c);
            }
        }
        // Fit the positive floor constant: min remainder / control.
        let mut floor = S::infinity();
        let mut violation = S::zero();
        let mut global_scale = S::zero();
        let mut max_control = S::zero();
        for &m in &levels {
            for &node in &nodes {
                max_control = max_control.max(control.at(node, m));
                global_scale = global_scale.max(local_scale.at(node, m));
            }
        }
        let tol = tol_factor * global_scale;
        let control_floor = max_control * S::lit(1e-14);
        for &m in &levels {
            for &node in &nodes {
                let r = remainder.at(node, m);
                let c = control.at(node, m);
                if c > control_floor {
                    floor = floor.min(r / c);
                }
                if r < -tol {
                    violation = violation.max(-r - tol);
                }
            }
        }
        rows.push(IdentityRow {
            name: "curvature-sign-bound",
            kind: RowKind::LowerBound,
            residual: violation,
            scale: global_scale,
            fitted_constant: if floor.is_finite() { floor } else { S::zero() },
            passed: violation <= S::zero(),
        });
    }

    // --- bound row: time-gradient cross -------------------------------------
    {
        let div5 = divergence_of(&pieces[4]);
        let dt_plain = diff::time_d1(&plain_grad_energy);
        let mut remainder = Field::zeros(Arc::clone(&grid));
        let mut control = Field::zeros(Arc::clone(&grid));
        let mut local_scale = Field::zeros(Arc::clone(&grid));
        for m in 0..nt {
            for node in 0..n {
                let psi = table.psi[node];
                let phi2 = phi2_at(node);
                let utv = ut.at(node, m);
                let mut l0u = S::zero();
                let mut grad_sq = S::zero();
                for i in 0..d {
                    let g = du[i].at(node, m);
                    grad_sq += g * g;
                    for j in 0..d {
                        l0u += co.a_at(node, i, j) * d2[i][j].at(node, m);
                    }
                }
                let lhs = (utv * utv - S::lit(2.0) * utv * l0u) * phi2;
                let r = lhs
                    - div5.at(node, m)
                    - dt_plain.at(node, m)
                    - S::lit(0.5) * utv * utv * phi2;
                let c = lm * lm * psi.powf(-(mu + mu) - S::lit(2.0)) * grad_sq * phi2;
                remainder.set(node, m, r);
                control.set(node, m, c);
                local_scale.set(
                    node,
                    m,
                    lhs.abs() + div5.at(node, m).abs() + dt_plain.at(node, m).abs() + c,
                );
            }
        }
        rows.push(lower_bound_row(
            "time-gradient-cross-bound",
            &remainder,
            &control,
            &local_scale,
            &nodes,
            &levels,
            tol_factor,
        ));
    }

    // --- bound row: principal square -----------------------------------------
    {
        let div6 = divergence_of(&pieces[5]);
        let mut remainder = Field::zeros(Arc::clone(&grid));
        let mut control = Field::zeros(Arc::clone(&grid));
        let mut local_scale = Field::zeros(Arc::clone(&grid));
        for m in 0..nt {
            for node in 0..n {
                let psi = table.psi[node];
                let phi2 = phi2_at(node);
                let mut l0u = S::zero();
                let mut hess_sq = S::zero();
                let mut grad_sq = S::zero();
                for i in 0..d {
                    let g = du[i].at(node, m);
                    grad_sq += g * g;
                    for j in 0..d {
                        let dij = d2[i][j].at(node, m);
                        l0u += co.a_at(node, i, j) * dij;
                        hess_sq += dij * dij;
                    }
                }
                let lhs = l0u * l0u * phi2;
                let r = lhs - div6.at(node, m)
                    - S::lit(0.5) * nu * nu * hess_sq * phi2;
                let c = lm * lm * psi.powf(-(mu + mu) - S::lit(2.0)) * grad_sq * phi2;
                remainder.set(node, m, r);
                control.set(node, m, c);
                local_scale.set(
                    node,
                    m,
                    lhs.abs() + div6.at(node, m).abs() + nu * nu * hess_sq * phi2 + c,
                );
            }
        }
        rows.push(lower_bound_row(
            "principal-square-bound",
            &remainder,
            &control,
            &local_scale,
            &nodes,
            &levels,
            tol_factor,
        ));
    }

    // --- positivity row: hessian product --------------------------------------
    {
        let mut min_gap = S::infinity();
        let mut scale = S::zero();
        let mut ratio_floor = S::infinity();
        let mut a_mat = vec![S::zero(); d * d];
        let mut h_mat = vec![S::zero(); d * d];
        let mut prod = vec![S::zero(); d * d];
        for &m in &levels {
            for &node in &nodes {
                let phi2 = phi2_at(node);
                for i in 0..d {
                    for j in 0..d {
                        a_mat[i * d + j] = co.a_at(node, i, j);
                        h_mat[i * d + j] = d2[i][j].at(node, m);
                    }
                }
                for i in 0..d {
                    for j in 0..d {
                        let mut acc = S::zero();
                        for k in 0..d {
                            acc += a_mat[i * d + k] * h_mat[k * d + j];
                        }
                        prod[i * d + j] = acc;
                    }
                }
                let mut tr_sq = S::zero();
                let mut hess_sq = S::zero();
                for i in 0..d {
                    for j in 0..d {
                        tr_sq += prod[i * d + j] * prod[j * d + i];
                        hess_sq += h_mat[i * d + j] * h_mat[i * d + j];
                    }
                }
                let gap = (tr_sq - nu * nu * hess_sq) * phi2;
                min_gap = min_gap.min(gap);
                scale = scale.max(tr_sq.abs() * phi2);
                if hess_sq > S::zero() {
                    ratio_floor = ratio_floor.min(tr_sq / hess_sq);
                }
            }
        }
        let tol = S::lit(1e-12) * scale;
        rows.push(IdentityRow {
            name: "hessian-product-positivity",
            kind: RowKind::Positivity,
            residual: (-min_gap).max(S::zero()),
            scale,
            fitted_constant: if ratio_floor.is_finite() {
                ratio_floor
            } else {
                nu * nu
            },
            passed: min_gap >= -tol,
        });
    }

    Ok(IdentityReport {
        rows,
        grid_h: h,
        grid_dt: dt,
    })
}

// ---------------------------------------------------------------------------
// Shared helper for downstream weighting.
// ---------------------------------------------------------------------------

/// Squared weight per spatial node, normalized to unit maximum over active
/// nodes. Evaluated in log space, so it stays finite for any valid `lambda`.
pub fn phi_sq_normalized<S: Scalar>(
    grid: &SpaceTimeGrid<S>,
    cw: &CarlemanWeight<S>,
) -> Result<Vec<S>> {
    let n = grid.n_nodes();
    let mut logs = vec![S::zero(); n];
    let mut x = vec![S::zero(); grid.dim()];
    let mut max_log = S::neg_infinity();
    for node in 0..n {
        grid.node_coords_into(node, &mut x);
        let lv = cw.log_value(&x)?;
        logs[node] = lv + lv;
        if grid.is_active(node) {
            max_log = max_log.max(logs[node]);
        }
    }
    Ok(logs.into_iter().map(|l| (l - max_log).exp()).collect())
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Domain;

    fn interval_setup(
        res: usize,
        nt: usize,
        t_final: f64,
    ) -> (Arc<SpaceTimeGrid<f64>>, EllipticCoefficients<f64>) {
        let domain = Domain::<f64>::interval(0.0, 0.5).unwrap();
        let grid = Arc::new(SpaceTimeGrid::build(domain, res, t_final, nt).unwrap());
        let co = EllipticCoefficients::laplacian(Arc::clone(&grid));
        (grid, co)
    }

    fn prism_setup(
        res: usize,
        nt: usize,
        t_final: f64,
    ) -> (Arc<SpaceTimeGrid<f64>>, EllipticCoefficients<f64>) {
        let domain = Domain::<f64>::prism(2).unwrap();
        let grid = Arc::new(SpaceTimeGrid::build(domain, res, t_final, nt).unwrap());
        let co = EllipticCoefficients::laplacian(Arc::clone(&grid));
        (grid, co)
    }

    /// Smooth bump supported in |s| < 1 with four vanishing derivatives at
    /// the edge.
    fn bump(s: f64) -> f64 {
        if s.abs() >= 1.0 {
            0.0
        } else {
            let q = 1.0 - s * s;
            q * q * q * q
        }
    }

    #[test]
    fn graded_terms_sum_to_the_conjugated_operator() {
        let (grid, co) = interval_setup(33, 9, 0.25);
        let cw = CarlemanWeight::new(2.0, 2.0).unwrap();
        let u = Field::from_fn(Arc::clone(&grid), |x, t| {
            (2.0 * x[0]).sin() * (-t).exp() + 0.3 * x[0] * x[0]
        });
        let terms = decompose(&u, &co, &cw).unwrap();
        let sum = terms.sum();

        let ut = diff::time_d1(&u);
        let lu = co.apply_principal(&u);
        let mut x = vec![0.0];
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for node in 0..grid.n_nodes() {
            grid.node_coords_into(node, &mut x);
            let phi = cw.value(&x).unwrap();
            for m in 0..grid.nt() {
                let want = (ut.at(node, m) - lu.at(node, m)) * phi;
                let got = sum.at(node, m);
                worst = worst.max((want - got).abs());
                scale = scale.max(want.abs());
            }
        }
        assert!(
            worst <= 1e-11 * scale,
            "graded sum deviates from the conjugated operator: {worst:e} vs scale {scale:e}"
        );
    }

    #[test]
    fn graded_terms_match_an_analytic_oracle_at_second_order() {
        let cw = CarlemanWeight::new(2.0, 2.0).unwrap();
        let mut errs = Vec::new();
        for res in [17usize, 33] {
            let nt = res;
            let (grid, co) = interval_setup(res, nt, 0.25);
            let u = Field::from_fn(Arc::clone(&grid), |x, t| {
                (2.0 * std::f64::consts::PI * x[0]).cos() * (-t).exp()
            });
            let terms = decompose(&u, &co, &cw).unwrap();
            let sum = terms.sum();

            let mut x = vec![0.0];
            let mut worst = 0.0f64;
            for node in 0..grid.n_nodes() {
                grid.node_coords_into(node, &mut x);
                let phi = cw.value(&x).unwrap();
                let k = 2.0 * std::f64::consts::PI;
                for m in 0..grid.nt() {
                    let t = grid.time(m);
                    let s = (k * x[0]).cos() * (-t).exp();
                    // analytic u_t - u_xx = (-1 + k^2) * s
                    let want = (k * k - 1.0) * s * phi;
                    worst = worst.max((sum.at(node, m) - want).abs());
                }
            }
            errs.push(worst);
        }
        let ratio = errs[0] / errs[1];
        assert!(
            (3.2..=4.8).contains(&ratio),
            "halving should shrink the oracle error fourfold, got ratio {ratio}"
        );
    }

    #[test]
    fn unit_conjugated_field_leaves_only_the_zero_order_term() {
        let (grid, co) = interval_setup(33, 9, 0.25);
        let cw = CarlemanWeight::new(1.0, 1.0).unwrap();
        // u = Phi^{-1} makes w identically one.
        let cw2 = cw;
        let u = Field::from_fn(Arc::clone(&grid), move |x, _| {
            (-(cw2.log_value(x).unwrap())).exp()
        });
        let terms = decompose(&u, &co, &cw).unwrap();

        assert!(
            terms.s1.linf() <= 1e-12,
            "time term must vanish to rounding, got {:e}",
            terms.s1.linf()
        );
        let h = grid.max_spacing();
        // The first/second splits see only stencil truncation of w = 1.
        let s4_scale = terms.s4.linf();
        assert!(terms.s2.linf() <= 200.0 * h * h * s4_scale);
        assert!(terms.s3.linf() <= 200.0 * h * h * s4_scale);

        // The zero-order term matches its closed form through w ~ 1.
        let mut x = vec![0.0];
        let (lam, mu) = (cw.lambda, cw.mu);
        for node in 0..grid.n_nodes() {
            grid.node_coords_into(node, &mut x);
            let wd = cw.derivs(&x).unwrap();
            let psi = wd.psi;
            let decay = 1.0 - (1.0 + 1.0 / mu) / lam * psi.powf(mu);
            let kappa = wd.grad_psi[0] * wd.grad_psi[0] * decay; // 1-d, hessian term zero
            let want = -lam * lam * mu * mu * psi.powf(-2.0 * mu - 2.0) * kappa;
            let got = terms.s4.at(node, 4);
            assert!(
                (got - want).abs() <= 1e-10 * want.abs(),
                "zero-order term off at node {node}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn slice_density_reads_only_its_own_level() {
        let (grid, co) = interval_setup(33, 9, 1.0);
        let cw = CarlemanWeight::new(2.0, 2.0).unwrap();
        let w = Field::from_fn(Arc::clone(&grid), |x, t| {
            let s = (std::f64::consts::PI * t).sin();
            (2.0 + (4.0 * x[0]).sin()) * (1.0 + s * s)
        });
        let v0 = v_density(&w, &co, &cw, 0).unwrap();

        let mut tampered = w.clone();
        for node in 0..grid.n_nodes() {
            tampered.set(node, 3, w.at(node, 3) + 100.0);
        }
        let v0_again = v_density(&tampered, &co, &cw, 0).unwrap();
        assert_eq!(
            v0.values(),
            v0_again.values(),
            "density at level 0 must ignore other levels bit-for-bit"
        );
    }

    #[test]
    fn matched_slices_cancel_and_mismatched_slices_are_rejected() {
        let (grid, co) = interval_setup(33, 9, 1.0);
        let cw = CarlemanWeight::new(2.0, 2.0).unwrap();
        let w = Field::from_fn(Arc::clone(&grid), |x, t| {
            let s = (std::f64::consts::PI * t).sin();
            (2.0 + (4.0 * x[0]).sin()) * (1.0 + s * s)
        });
        let defect = check_cancellation(&w, &co, &cw).unwrap();
        assert!(defect <= 1e-12, "matched slices must cancel, defect {defect:e}");

        let mut bad = w.clone();
        let last = grid.nt() - 1;
        for node in 0..grid.n_nodes() {
            bad.set(node, last, 2.0 * w.at(node, last));
        }
        match check_cancellation(&bad, &co, &cw) {
            Err(Error::SliceMismatch { defect }) => assert!(defect > 1e-6),
            other => panic!("expected a slice-mismatch error, got {other:?}"),
        }
        let raw = cancellation_defect_raw(&bad, &co, &cw).unwrap();
        assert!(
            raw > 1e-6,
            "doubling the terminal slice must leave a visible defect, got {raw:e}"
        );
    }

    #[test]
    fn flux_divergence_integral_matches_face_flux() {
        // Volume integral of the discrete divergence vs. the face flux sum,
        // on a box domain where every face is explicit.  The weight must be
        // resolved by the grid (per-cell variation of ln Φ well under one)
        // or the end-correction terms of the telescoping sum stop scaling
        // with h²; the grids are fine enough that h·|∇ln Φ| ≈ 0.25.
        let cw = CarlemanWeight::new(1.0, 1.0).unwrap();
        let mut defects = Vec::new();
        for res in [17usize, 33] {
            let (grid, co) = prism_setup(res, 9, 0.5);
            let u = Field::from_fn(Arc::clone(&grid), |x, t| {
                (2.0 * x[0] + t).sin() * (3.0 * x[1]).cos()
            });
            let bundle = flux_bundle(&u, &co, &cw).unwrap();
            let m = 4;

            let mut volume = 0.0;
            for &node in grid.active_nodes() {
                volume += grid.quad_weight(node) * bundle.divergence.at(node, m);
            }
            let shape = grid.shape();
            let mut surface = 0.0;
            for node in 0..grid.n_nodes() {
                let mi = grid.multi_index(node);
                for axis in 0..grid.dim() {
                    if mi[axis] == 0 {
                        surface -=
                            grid.face_weight(node, axis) * bundle.components[axis].at(node, m);
                    }
                    if mi[axis] == shape[axis] - 1 {
                        surface +=
                            grid.face_weight(node, axis) * bundle.components[axis].at(node, m);
                    }
                }
            }
            defects.push((volume - surface).abs());
        }
        let ratio = defects[0] / defects[1];
        assert!(
            (2.5..=6.5).contains(&ratio),
            "divergence-vs-face defect should shrink at second order, ratio {ratio}"
        );
    }

    #[test]
    fn compactly_supported_flux_integrates_to_zero() {
        let (grid, co) = interval_setup(33, 17, 1.0);
        let cw = CarlemanWeight::new(2.0, 2.0).unwrap();
        let u = Field::from_fn(Arc::clone(&grid), |x, t| {
            bump((x[0] - 0.25) / 0.1) * bump((t - 0.5) / 0.3)
        });
        let bundle = flux_bundle(&u, &co, &cw).unwrap();

        let mut total = 0.0;
        let mut mass = 0.0;
        for m in 0..grid.nt() {
            let tw = grid.time_weight(m);
            for &node in grid.active_nodes() {
                let qw = grid.quad_weight(node);
                total += tw * qw * bundle.divergence.at(node, m);
                mass += tw * qw * bundle.divergence.at(node, m).abs();
            }
        }
        assert!(
            total.abs() <= 1e-12 * mass.max(1e-300),
            "interior flux must telescope away: total {total:e} vs mass {mass:e}"
        );
    }

    #[test]
    fn data_boundary_flux_pair_cancels_to_rounding() {
        let domain = Domain::<f64>::prism(2).unwrap();
        let grid = Arc::new(SpaceTimeGrid::build(domain, 17, 0.5, 7).unwrap());
        // Anisotropic coefficients with off-diagonal coupling so the pair is
        // nontrivial.
        let co = EllipticCoefficients::from_fns(
            Arc::clone(&grid),
            |x: &[f64], i, j| match (i, j) {
                (0, 0) => 2.0 + x[1] * x[1],
                (1, 1) => 3.0,
                _ => 0.4 + 0.1 * x[0] * x[1],
            },
            None,
            |_, _| 0.0,
            |_| 0.0,
        );
        let cw = CarlemanWeight::new(2.0, 2.0).unwrap();
        let u = Field::from_fn(Arc::clone(&grid), |x, t| {
            (3.0 * x[0] + 2.0 * x[1]).sin() * (1.0 + t) + x[0] * x[1] * x[1]
        });
        let pair = boundary_flux_pair(&u, &co, &cw).unwrap();
        assert!(pair.scale > 0.0, "test field must produce a nonzero pair member");
        assert!(
            pair.defect <= 1e-12 * pair.scale,
            "paired entries must cancel: defect {:e}, scale {:e}",
            pair.defect,
            pair.scale
        );
    }

    #[test]
    fn estimate_rejects_zero_and_non_compact_fields() {
        let (grid, co) = interval_setup(33, 17, 1.0);
        let zero = Field::zeros(Arc::clone(&grid));
        match integrated_estimate(&zero, &co, 2.0, &[4.0]) {
            Err(Error::ZeroField) => {}
            other => panic!("expected the zero-field error, got {other:?}"),
        }
        let flat = Field::from_fn(Arc::clone(&grid), |_, _| 1.0);
        match integrated_estimate(&flat, &co, 2.0, &[4.0]) {
            Err(Error::NotCompactlySupported { .. }) => {}
            other => panic!("expected a compact-support error, got {other:?}"),
        }
    }

    #[test]
    fn estimate_margins_are_positive_finite_and_deterministic() {
        let (grid, co) = interval_setup(33, 17, 1.0);
        let u = Field::from_fn(Arc::clone(&grid), |x, t| {
            bump((x[0] - 0.25) / 0.1) * bump((t - 0.5) / 0.3)
        });
        let lambdas = [4.0, 8.0, 64.0];
        let reports = integrated_estimate(&u, &co, 2.0, &lambdas).unwrap();
        assert_eq!(reports.len(), 3);
        for r in &reports {
            assert!(r.lhs_integral.is_finite() && r.lhs_integral > 0.0);
            assert!(r.energy_bracket.is_finite() && r.energy_bracket > 0.0);
            assert!(r.margin_ratio.is_finite() && r.margin_ratio > 0.0);
            assert!(r.cancellation_defect <= 1e-12);
        }
        let again = integrated_estimate(&u, &co, 2.0, &lambdas).unwrap();
        for (a, b) in reports.iter().zip(again.iter()) {
            assert_eq!(a.lhs_integral.to_bits(), b.lhs_integral.to_bits());
            assert_eq!(a.energy_bracket.to_bits(), b.energy_bracket.to_bits());
            assert_eq!(a.margin_ratio.to_bits(), b.margin_ratio.to_bits());
        }
    }

    #[test]
    fn identity_rows_pass_and_exact_rows_shrink_at_second_order() {
        // λ, μ sit in the window where the zero-order curvature factor stays
        // positive (λ > (1 + 1/μ)·ψ^μ everywhere on the domain) while the
        // weight is still resolved by the coarse grid: the discrete product
        // rule behind the exact rows carries errors relative to the per-cell
        // variation of ln Φ, so h·|∇ln Φ| must stay well under one.
        let cw = CarlemanWeight::new(1.5, 1.0).unwrap();
        let mut residuals: Vec<Vec<f64>> = Vec::new();
        for res in [17usize, 33] {
            let domain = Domain::<f64>::interval(0.0, 0.25).unwrap();
            let grid = Arc::new(SpaceTimeGrid::build(domain, res, 0.25, res).unwrap());
            let co = EllipticCoefficients::laplacian(Arc::clone(&grid));
            let u = Field::from_fn(Arc::clone(&grid), |x, t| {
                (3.0 * x[0] + 0.5 * t).sin() + 0.4 * (x[0] * x[0] - t).cos()
            });
            let report = identity_report(&u, &co, &cw).unwrap();
            assert!(
                report.all_passed(),
                "all rows must pass at res {res}: {:?}",
                report
                    .rows
                    .iter()
                    .filter(|r| !r.passed)
                    .map(|r| r.name)
                    .collect::<Vec<_>>()
            );
            residuals.push(
                report
                    .rows
                    .iter()
                    .filter(|r| r.kind == RowKind::Exact)
                    .map(|r| r.residual / r.scale.max(1e-300))
                    .collect(),
            );
        }
        for (k, (coarse, fine)) in residuals[0].iter().zip(residuals[1].iter()).enumerate() {
            let ratio = coarse / fine;
            assert!(
                ratio >= 2.8,
                "exact row {k} must shrink under refinement, got ratio {ratio}"
            );
        }
    }

    #[test]
    fn identity_rows_pass_on_a_plane_domain_with_variable_coefficients() {
        let domain = Domain::<f64>::prism(2).unwrap();
        let grid = Arc::new(SpaceTimeGrid::build(domain, 9, 0.5, 9).unwrap());
        let co = EllipticCoefficients::variable_a(Arc::clone(&grid));
        let cw = CarlemanWeight::new(1.5, 1.0).unwrap();
        let u = Field::from_fn(Arc::clone(&grid), |x: &[f64], t| {
            (2.0 * x[0] + x[1]).sin() * (1.0 + 0.5 * t) + 0.2 * x[1] * x[1]
        });
        let report = identity_report(&u, &co, &cw).unwrap();
        assert!(
            report.all_passed(),
            "failing rows: {:?}",
            report
                .rows
                .iter()
                .filter(|r| !r.passed)
                .map(|r| (r.name, r.residual, r.scale))
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn hessian_positivity_is_an_exact_equality_for_the_identity_matrix() {
        let (grid, co) = interval_setup(17, 9, 0.5);
        let cw = CarlemanWeight::new(2.0, 2.0).unwrap();
        let u = Field::from_fn(Arc::clone(&grid), |x, t| (4.0 * x[0] - t).sin());
        let report = identity_report(&u, &co, &cw).unwrap();
        let row = report.row("hessian-product-positivity").unwrap();
        assert!(row.passed);
        assert_eq!(
            row.residual, 0.0,
            "identity coefficients give exact equality in the product form"
        );
    }

    #[test]
    fn normalized_weights_peak_at_one() {
        let (grid, _) = interval_setup(33, 9, 1.0);
        let cw = CarlemanWeight::new(64.0, 2.0).unwrap();
        let weights = phi_sq_normalized(&grid, &cw).unwrap();
        let mx = weights
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((mx - 1.0).abs() < 1e-15, "max must normalize to one, got {mx}");
        assert!(weights.iter().all(|w| w.is_finite() && *w >= 0.0));
    }
}
