//! Elliptic coefficients, the operators L₀ and L, and the implicit forward
//! solver for u_t = Lu + b(x)·R(x,t).
//!
//! Coefficients are sampled per bounding-box node: the principal matrix
//! a^{ij}(x) (symmetric, uniformly elliptic), its spatial derivatives
//! ∂_k a^{ij}, the first-order vector b_j(x), and the zeroth-order c(x).
//! `validate` certifies symmetry and ellipticity (smallest eigenvalue over
//! all nodes) and bounds the C¹ size of a^{ij}.
//!
//! `apply_principal` is L₀u = Σ a^{ij} u_{x_i x_j}; `apply_full` adds
//! Σ b_j u_{x_j} + c·u. Both use the stencils of [`crate::diff`], so pure
//! second derivatives are central three-point and mixed ones are
//! first-derivative compositions, keeping D_iD_j ≈ D_jD_i.
//!
//! `forward_solve` integrates the parabolic problem by backward Euler with
//! Dirichlet data on the full lateral boundary, returning the solution, its
//! terminal slice, and the Dirichlet/Neumann traces on the configured data
//! boundary. Neumann traces use the same second-order one-sided stencil
//! everywhere in the crate so trace noise floors stay consistent.

use std::io::BufRead;
use std::sync::Arc;

use crate::diff;
use crate::error::{Error, Result};
use crate::field::{Field, SpatialField, Trace};
use crate::geometry::{DataBoundary, SpaceTimeGrid, SpatialStatus};
use crate::linalg::{bicgstab, CsrBuilder};
use crate::scalar::Scalar;

/// Sampled coefficients of the elliptic operator on a grid's bounding box.
#[derive(Debug, Clone)]
pub struct EllipticCoefficients<S> {
    grid: Arc<SpaceTimeGrid<S>>,
    dim: usize,
    /// `[node·d² + i·d + j]`
    a: Vec<S>,
    /// `[node·d³ + k·d² + i·d + j]` — ∂_k a^{ij}
    da: Vec<S>,
    /// `[node·d + j]`
    b_vec: Vec<S>,
    /// `[node]`
    c: Vec<S>,
}

/// Result of `validate`: certified ellipticity constant and C¹ bound.
#[derive(Debug, Clone, Copy)]
pub struct CoeffCertificate<S> {
    /// Smallest principal-matrix eigenvalue over all sampled nodes.
    pub nu_est: S,
    /// Max over nodes of max(|a^{ij}|, |∂_k a^{ij}| by finite differences).
    pub a_bound: S,
}

/// Output bundle of the forward solver.
#[derive(Debug, Clone)]
pub struct ForwardSolution<S> {
    /// Space–time solution u.
    pub u: Field<S>,
    /// Terminal slice u(·, T).
    pub terminal: SpatialField<S>,
    /// Dirichlet trace on the data boundary (exact restriction of u).
    pub p: Trace<S>,
    /// Neumann trace on the data boundary (one-sided normal differences).
    pub q: Trace<S>,
}

impl<S: Scalar> EllipticCoefficients<S> {
    /// Sample coefficients from closures. `a_fn(x, i, j)` must be symmetric;
    /// `da_fn(x, k, i, j)` supplies analytic derivatives ∂_k a^{ij} (pass
    /// `None` to fill them by finite differences of the sampled a).
    pub fn from_fns(
        grid: Arc<SpaceTimeGrid<S>>,
        a_fn: impl Fn(&[S], usize, usize) -> S,
        da_fn: Option<&dyn Fn(&[S], usize, usize, usize) -> S>,
        b_fn: impl Fn(&[S], usize) -> S,
        c_fn: impl Fn(&[S]) -> S,
    ) -> Self {
        let d = grid.dim();
        let n = grid.n_nodes();
        let mut a = vec![S::zero(); n * d * d];
        let mut da = vec![S::zero(); n * d * d * d];
        let mut b_vec = vec![S::zero(); n * d];
        let mut c = vec![S::zero(); n];
        let mut x = vec![S::zero(); d];
        for node in 0..n {
            grid.node_coords_into(node, &mut x);
            for i in 0..d {
                for j in 0..d {
                    a[node * d * d + i * d + j] = a_fn(&x, i, j);
                    if let Some(df) = da_fn {
                        for k in 0..d {
                            da[node * d * d * d + k * d * d + i * d + j] = df(&x, k, i, j);
                        }
                    }
                }
                b_vec[node * d + i] = b_fn(&x, i);
            }
            c[node] = c_fn(&x);
        }
        let mut co = Self { grid, dim: d, a, da, b_vec, c };
        if da_fn.is_none() {
            co.fill_da_by_differences();
        }
        co
    }

    /// The Laplacian: a = I, no lower-order terms.
    pub fn laplacian(grid: Arc<SpaceTimeGrid<S>>) -> Self {
        Self::from_fns(
            grid,
            |_, i, j| if i == j { S::one() } else { S::zero() },
            Some(&|_: &[S], _, _, _| S::zero()),
            |_, _| S::zero(),
            |_| S::zero(),
        )
    }

    /// Variable principal part: a¹¹(x) = 1 + x₁, other entries identity.
    pub fn variable_a(grid: Arc<SpaceTimeGrid<S>>) -> Self {
        Self::from_fns(
            grid,
            |x, i, j| {
                if i == 0 && j == 0 {
                    S::one() + x[0]
                } else if i == j {
                    S::one()
                } else {
                    S::zero()
                }
            },
            Some(&|_: &[S], k: usize, i: usize, j: usize| {
                if k == 0 && i == 0 && j == 0 {
                    S::one()
                } else {
                    S::zero()
                }
            }),
            |_, _| S::zero(),
            |_| S::zero(),
        )
    }

    /// Variable principal part plus smooth first- and zeroth-order terms:
    /// b_j(x) = 0.3·cos(x_j), c(x) = −1/2 + x₁/10.
    pub fn full_lower_order(grid: Arc<SpaceTimeGrid<S>>) -> Self {
        Self::from_fns(
            grid,
            |x, i, j| {
                if i == 0 && j == 0 {
                    S::one() + x[0]
                } else if i == j {
                    S::one()
                } else {
                    S::zero()
                }
            },
            Some(&|_: &[S], k: usize, i: usize, j: usize| {
                if k == 0 && i == 0 && j == 0 {
                    S::one()
                } else {
                    S::zero()
                }
            }),
            |x, j| S::lit(0.3) * x[j].cos(),
            |x| S::lit(-0.5) + S::lit(0.1) * x[0],
        )
    }

    /// Load a coefficient table. Columns per row: the node's integer index
    /// along each axis, then a^{ij} row-major (d² values), then b_j
    /// (d values), then c. Rows may appear in any order but must cover every
    /// bounding-box node exactly once. A non-numeric first line is treated
    /// as a header. Derivatives ∂_k a^{ij} are filled by finite differences.
    pub fn from_table(grid: Arc<SpaceTimeGrid<S>>, reader: impl BufRead) -> Result<Self> {
        let d = grid.dim();
        let n = grid.n_nodes();
        let ncols = d + d * d + d + 1;
        let mut a = vec![S::zero(); n * d * d];
        let mut b_vec = vec![S::zero(); n * d];
        let mut c = vec![S::zero(); n];
        let mut seen = vec![false; n];
        let mut mi = vec![0usize; d];
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::TableParse {
                line: lineno + 1,
                what: format!("read failure: {e}"),
            })?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let cells: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            if lineno == 0 && cells[0].parse::<f64>().is_err() {
                continue; // header row
            }
            if cells.len() != ncols {
                return Err(Error::TableParse {
                    line: lineno + 1,
                    what: format!("expected {ncols} columns, found {}", cells.len()),
                });
            }
            for k in 0..d {
                mi[k] = cells[k].parse::<usize>().map_err(|_| Error::TableParse {
                    line: lineno + 1,
                    what: format!("bad node index '{}'", cells[k]),
                })?;
                if mi[k] >= grid.shape()[k] {
                    return Err(Error::TableParse {
                        line: lineno + 1,
                        what: format!(
                            "index {} out of range for axis {k} (size {})",
                            mi[k],
                            grid.shape()[k]
                        ),
                    });
                }
            }
            let node = grid.linear_index(&mi);
            if seen[node] {
                return Err(Error::TableParse {
                    line: lineno + 1,
                    what: format!("duplicate row for node {node}"),
                });
            }
            seen[node] = true;
            let parse = |cell: &str| -> Result<S> {
                cell.parse::<f64>().map(S::lit).map_err(|_| Error::TableParse {
                    line: lineno + 1,
                    what: format!("bad float '{cell}'"),
                })
            };
            for i in 0..d {
                for j in 0..d {
                    a[node * d * d + i * d + j] = parse(cells[d + i * d + j])?;
                }
            }
            for j in 0..d {
                b_vec[node * d + j] = parse(cells[d + d * d + j])?;
            }
            c[node] = parse(cells[d + d * d + d])?;
        }
        if let Some(node) = seen.iter().position(|&s| !s) {
            return Err(Error::TableParse {
                line: 0,
                what: format!("node {node} missing from the table"),
            });
        }
        let mut co =
            Self { grid, dim: d, a, da: vec![S::zero(); n * d * d * d], b_vec, c };
        co.fill_da_by_differences();
        Ok(co)
    }

    /// Serialize back to the table format accepted by `from_table`.
    pub fn to_table(&self, mut fmt: impl FnMut(S) -> String) -> String {
        let d = self.dim;
        let mut out = String::new();
        for node in 0..self.grid.n_nodes() {
            let mi = self.grid.multi_index(node);
            let mut cells: Vec<String> = mi.iter().map(|v| v.to_string()).collect();
            for i in 0..d {
                for j in 0..d {
                    cells.push(fmt(self.a_at(node, i, j)));
                }
            }
            for j in 0..d {
                cells.push(fmt(self.b_at(node, j)));
            }
            cells.push(fmt(self.c_at(node)));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    fn fill_da_by_differences(&mut self) {
        let d = self.dim;
        let n = self.grid.n_nodes();
        for i in 0..d {
            for j in 0..d {
                let comp: Vec<S> =
                    (0..n).map(|node| self.a[node * d * d + i * d + j]).collect();
                let f = SpatialField::from_values(self.grid.clone(), comp);
                for k in 0..d {
                    let dk = diff::d1(&f, k);
                    for node in 0..n {
                        self.da[node * d * d * d + k * d * d + i * d + j] = dk.at(node);
                    }
                }
            }
        }
    }

    #[inline]
    pub fn grid(&self) -> &Arc<SpaceTimeGrid<S>> {
        &self.grid
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// a^{ij} at a node.
    #[inline]
    pub fn a_at(&self, node: usize, i: usize, j: usize) -> S {
        self.a[node * self.dim * self.dim + i * self.dim + j]
    }

    /// ∂_k a^{ij} at a node.
    #[inline]
    pub fn da_at(&self, node: usize, k: usize, i: usize, j: usize) -> S {
        let d = self.dim;
        self.da[node * d * d * d + k * d * d + i * d + j]
    }

    /// First-order coefficient b_j at a node.
    #[inline]
    pub fn b_at(&self, node: usize, j: usize) -> S {
        self.b_vec[node * self.dim + j]
    }

    /// Zeroth-order coefficient c at a node.
    #[inline]
    pub fn c_at(&self, node: usize) -> S {
        self.c[node]
    }

    /// Certify symmetry and ellipticity; bound the C¹ size of a^{ij}.
    pub fn validate(&self) -> Result<CoeffCertificate<S>> {
        let d = self.dim;
        let n = self.grid.n_nodes();
        let tol = S::lit(1e-12);
        for node in 0..n {
            for i in 0..d {
                for j in (i + 1)..d {
                    let defect = (self.a_at(node, i, j) - self.a_at(node, j, i)).abs();
                    if defect > tol {
                        return Err(Error::SymmetryViolation {
                            node,
                            i,
                            j,
                            defect: defect.to_f64().unwrap_or(f64::NAN),
                        });
                    }
                }
            }
        }
        let mut nu_est = S::infinity();
        let mut nu_node = 0;
        let mut m = vec![S::zero(); d * d];
        for node in 0..n {
            for k in 0..d * d {
                m[k] = self.a[node * d * d + k];
            }
            let lam = min_eigenvalue_sym(&mut m, d);
            if lam < nu_est {
                nu_est = lam;
                nu_node = node;
            }
        }
        if !(nu_est > S::zero()) {
            return Err(Error::EllipticityViolation {
                node: nu_node,
                nu_est: nu_est.to_f64().unwrap_or(f64::NAN),
            });
        }
        // C¹ bound: the max of |a^{ij}| and finite-difference |∂a^{ij}|.
        let mut a_bound = S::zero();
        for i in 0..d {
            for j in 0..d {
                let comp: Vec<S> =
                    (0..n).map(|node| self.a[node * d * d + i * d + j]).collect();
                let f = SpatialField::from_values(self.grid.clone(), comp);
                for node in 0..n {
                    a_bound = a_bound.max(f.at(node).abs());
                }
                for k in 0..d {
                    let dk = diff::d1(&f, k);
                    for node in 0..n {
                        a_bound = a_bound.max(dk.at(node).abs());
                    }
                }
            }
        }
        Ok(CoeffCertificate { nu_est, a_bound })
    }

    /// Principal part L₀u = Σ a^{ij} u_{x_i x_j} on every box node and level.
    pub fn apply_principal(&self, u: &Field<S>) -> Field<S> {
        let d = self.dim;
        let n = self.grid.n_nodes();
        let mut out = Field::zeros(self.grid.clone());
        for i in 0..d {
            for j in i..d {
                let dij = diff::field_deriv2(u, i, j);
                let factor = if i == j { S::one() } else { S::lit(2.0) };
                let ov = out.values_mut();
                let dv = dij.values();
                for idx in 0..ov.len() {
                    let node = idx % n;
                    ov[idx] += factor * self.a_at(node, i, j) * dv[idx];
                }
            }
        }
        out
    }

    /// Full operator Lu = L₀u + Σ b_j u_{x_j} + c·u.
    pub fn apply_full(&self, u: &Field<S>) -> Field<S> {
        let d = self.dim;
        let n = self.grid.n_nodes();
        let mut out = self.apply_principal(u);
        for j in 0..d {
            let dj = diff::field_d1(u, j);
            let ov = out.values_mut();
            let dv = dj.values();
            for idx in 0..ov.len() {
                ov[idx] += self.b_at(idx % n, j) * dv[idx];
            }
        }
        let ov = out.values_mut();
        let uv = u.values();
        for idx in 0..ov.len() {
            ov[idx] += self.c_at(idx % n) * uv[idx];
        }
        out
    }

    /// Backward-Euler solve of u_t = Lu + b·R with initial data f and
    /// Dirichlet values `dirichlet(x, t)` on the whole lateral boundary.
    ///
    /// When `sigma` is given, |R| ≥ σ is enforced on every active node and
    /// level before stepping. Traces are extracted on `data_boundary`.
    pub fn forward_solve(
        &self,
        b: &SpatialField<S>,
        r: &Field<S>,
        f: &SpatialField<S>,
        dirichlet: impl Fn(&[S], S) -> S,
        sigma: Option<S>,
        data_boundary: DataBoundary,
    ) -> Result<ForwardSolution<S>> {
        let grid = &self.grid;
        if !grid.domain().is_box() {
            return Err(Error::Precondition(
                "forward solver requires an exactly gridded box domain".into(),
            ));
        }
        if let Some(sig) = sigma {
            if !(sig > S::zero()) {
                return Err(Error::Precondition("sigma must be positive".into()));
            }
            for m in 0..grid.nt() {
                let vals = r.level_values(m);
                for &node in grid.active_nodes() {
                    if vals[node].abs() < sig {
                        return Err(Error::PositivityViolation {
                            node,
                            min_abs: vals[node].abs().to_f64().unwrap_or(f64::NAN),
                            sigma: sig.to_f64().unwrap_or(f64::NAN),
                        });
                    }
                }
            }
        }

        let d = self.dim;
        let interior = grid.interior_nodes().to_vec();
        let n_int = interior.len();
        let mut unknown_of = vec![usize::MAX; grid.n_nodes()];
        for (k, &node) in interior.iter().enumerate() {
            unknown_of[node] = k;
        }
        let boundary: Vec<usize> = grid.lateral_nodes();
        let mut bnd_of = vec![usize::MAX; grid.n_nodes()];
        for (k, &node) in boundary.iter().enumerate() {
            bnd_of[node] = k;
        }

        // Assemble M = I/dt − L over interior unknowns; boundary couplings go
        // to a rectangular matrix applied to the Dirichlet values each step.
        let inv_dt = S::one() / grid.dt();
        let mut ab = CsrBuilder::new(n_int, n_int);
        let mut bb = CsrBuilder::new(n_int, boundary.len());
        let push = |row: usize, node: usize, m_val: S, ab: &mut CsrBuilder<S>, bb: &mut CsrBuilder<S>| {
            if unknown_of[node] != usize::MAX {
                ab.push(row, unknown_of[node], m_val);
            } else {
                debug_assert_ne!(bnd_of[node], usize::MAX);
                // Move to the right-hand side: rhs += (−m_val)·g.
                bb.push(row, bnd_of[node], -m_val);
            }
        };
        let two = S::lit(2.0);
        let four = S::lit(4.0);
        for (row, &node) in interior.iter().enumerate() {
            let mut diag = inv_dt - self.c_at(node);
            for k in 0..d {
                let hk = grid.spacing()[k];
                let sk = grid.stride(k);
                let akk = self.a_at(node, k, k);
                let bk = self.b_at(node, k);
                diag += two * akk / (hk * hk);
                let off = akk / (hk * hk);
                let adv = bk / (two * hk);
                push(row, node + sk, -off - adv, &mut ab, &mut bb);
                push(row, node - sk, -off + adv, &mut ab, &mut bb);
                for j in (k + 1)..d {
                    let hj = grid.spacing()[j];
                    let sj = grid.stride(j);
                    let cross = two * self.a_at(node, k, j) / (four * hk * hj);
                    push(row, node + sk + sj, -cross, &mut ab, &mut bb);
                    push(row, node - sk - sj, -cross, &mut ab, &mut bb);
                    push(row, node + sk - sj, cross, &mut ab, &mut bb);
                    push(row, node - sk + sj, cross, &mut ab, &mut bb);
                }
            }
            ab.push(row, row, diag);
        }
        let a_mat = ab.build();
        let b_mat = bb.build();

        let mut u = Field::zeros(grid.clone());
        // Initial slice: f on active nodes.
        {
            let lvl = u.level_values_mut(0);
            for &node in grid.active_nodes() {
                lvl[node] = f.at(node);
            }
        }
        let mut x_prev: Vec<S> = interior.iter().map(|&n| f.at(n)).collect();
        let mut g = vec![S::zero(); boundary.len()];
        let mut rhs = vec![S::zero(); n_int];
        let mut bg = vec![S::zero(); n_int];
        let mut coords = vec![S::zero(); d];
        for m in 1..grid.nt() {
            let t = grid.time(m);
            for (k, &node) in boundary.iter().enumerate() {
                grid.node_coords_into(node, &mut coords);
                g[k] = dirichlet(&coords, t);
            }
            b_mat.matvec(&g, &mut bg);
            let rv = r.level_values(m);
            for (k, &node) in interior.iter().enumerate() {
                rhs[k] = x_prev[k] * inv_dt + b.at(node) * rv[node] + bg[k];
            }
            let (x, _iters) =
                bicgstab(&a_mat, &rhs, Some(&x_prev), S::lit(1e-12), 50 * n_int.max(64))?;
            {
                let lvl = u.level_values_mut(m);
                for (k, &node) in interior.iter().enumerate() {
                    lvl[node] = x[k];
                }
                for (k, &node) in boundary.iter().enumerate() {
                    lvl[node] = g[k];
                }
            }
            x_prev = x;
        }

        let terminal = u.slice(grid.nt() - 1);
        let data = grid.data_nodes(data_boundary);
        let p = Trace::restrict(&u, data.clone());
        let mut q = Trace::zeros(grid.clone(), data.clone());
        for (k, &node) in data.iter().enumerate() {
            let (axis, plus) = match grid.status(node) {
                SpatialStatus::Boundary(tag) => tag.face_axis_side().ok_or_else(|| {
                    Error::Precondition(
                        "Neumann trace needs a flat axis-aligned data face".into(),
                    )
                })?,
                _ => unreachable!("data nodes are boundary nodes"),
            };
            for m in 0..grid.nt() {
                let dn = diff::normal_derivative_at(grid, u.level_values(m), node, axis, plus);
                q.set(k, m, dn);
            }
        }
        Ok(ForwardSolution { u, terminal, p, q })
    }
}

/// Smallest eigenvalue of a symmetric d×d matrix (row-major, d ≤ 4):
/// closed forms for d ≤ 2, cyclic Jacobi rotations otherwise.
pub fn min_eigenvalue_sym<S: Scalar>(m: &mut [S], d: usize) -> S {
    debug_assert_eq!(m.len(), d * d);
    match d {
        0 => S::zero(),
        1 => m[0],
        2 => {
            let half = S::lit(0.5);
            let tr = m[0] + m[3];
            let det = m[0] * m[3] - m[1] * m[2];
            let disc = (tr * tr - S::lit(4.0) * det).max(S::zero()).sqrt();
            (tr - disc) * half
        }
        _ => {
            let scale = m.iter().fold(S::zero(), |acc, &v| acc.max(v.abs())).max(S::one());
            for _sweep in 0..60 {
                let mut off = S::zero();
                for p in 0..d {
                    for q in (p + 1)..d {
                        off = off.max(m[p * d + q].abs());
                    }
                }
                if off <= S::epsilon() * scale {
                    break;
                }
                for p in 0..d {
                    for q in (p + 1)..d {
                        let apq = m[p * d + q];
                        if apq.abs() <= S::epsilon() * scale {
                            continue;
                        }
                        let app = m[p * d + p];
                        let aqq = m[q * d + q];
                        let theta = (aqq - app) / (S::lit(2.0) * apq);
                        let t = {
                            let sign = if theta >= S::zero() { S::one() } else { -S::one() };
                            sign / (theta.abs() + (theta * theta + S::one()).sqrt())
                        };
                        let cos = S::one() / (t * t + S::one()).sqrt();
                        let sin = t * cos;
                        for k in 0..d {
                            let mkp = m[k * d + p];
                            let mkq = m[k * d + q];
                            m[k * d + p] = cos * mkp - sin * mkq;
                            m[k * d + q] = sin * mkp + cos * mkq;
                        }
                        for k in 0..d {
                            let mpk = m[p * d + k];
                            let mqk = m[q * d + k];
                            m[p * d + k] = cos * mpk - sin * mqk;
                            m[q * d + k] = sin * mpk + cos * mqk;
                        }
                    }
                }
            }
            let mut lam = m[0];
            for k in 1..d {
                lam = lam.min(m[k * d + k]);
            }
            lam
        }
    }
}
