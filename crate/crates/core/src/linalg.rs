//! Sparse matrix storage and the two Krylov solvers the crate needs.
//!
//! * [`Csr`] — compressed sparse rows built from (row, col, value) triplets
//!   with deterministic duplicate merging (sorted order, fixed summation).
//! * [`pcg`] — Jacobi-preconditioned conjugate gradients for symmetric
//!   positive definite operators supplied as closures (the reconstruction's
//!   normal equations are applied matrix-free).
//! * [`bicgstab`] — Jacobi-preconditioned BiCGStab for the mildly
//!   nonsymmetric backward-Euler step matrices.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct Csr<S> {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<S>,
}

/// Triplet accumulator for building a [`Csr`].
#[derive(Debug)]
pub struct CsrBuilder<S> {
    nrows: usize,
    ncols: usize,
    triplets: Vec<(usize, usize, S)>,
}

impl<S: Scalar> CsrBuilder<S> {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, triplets: Vec::new() }
    }

    /// Record one entry; duplicates accumulate.
    #[inline]
    pub fn push(&mut self, row: usize, col: usize, val: S) {
        debug_assert!(row < self.nrows && col < self.ncols);
        if val != S::zero() {
            self.triplets.push((row, col, val));
        }
    }

    /// Sort, merge duplicates, and freeze.
    pub fn build(mut self) -> Csr<S> {
        self.triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut cols: Vec<usize> = Vec::with_capacity(self.triplets.len());
        let mut vals: Vec<S> = Vec::with_capacity(self.triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.triplets {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..self.nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Csr { nrows: self.nrows, ncols: self.ncols, row_ptr, cols, vals }
    }
}

impl<S: Scalar> Csr<S> {
    #[inline]
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// y = A x.
    pub fn matvec(&self, x: &[S], y: &mut [S]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for r in 0..self.nrows {
            let mut acc = S::zero();
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[r] = acc;
        }
    }

    /// y = Aᵀ x.
    pub fn matvec_t(&self, x: &[S], y: &mut [S]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for v in y.iter_mut() {
            *v = S::zero();
        }
        for r in 0..self.nrows {
            let xr = x[r];
            if xr == S::zero() {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.cols[k]] += self.vals[k] * xr;
            }
        }
    }

    /// Column sums of squared entries: diag(AᵀA), the Jacobi seed for the
    /// normal equations.
    pub fn column_sq_sums(&self) -> Vec<S> {
        let mut d = vec![S::zero(); self.ncols];
        for k in 0..self.vals.len() {
            d[self.cols[k]] += self.vals[k] * self.vals[k];
        }
        d
    }

    /// Diagonal entries (zero where absent).
    pub fn diagonal(&self) -> Vec<S> {
        let mut d = vec![S::zero(); self.nrows.min(self.ncols)];
        for r in 0..self.nrows.min(self.ncols) {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.cols[k] == r {
                    d[r] = self.vals[k];
                }
            }
        }
        d
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
fn norm2<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Jacobi-preconditioned conjugate gradients for an SPD operator given as a
/// closure. Converges to relative residual `tol` (‖b − Ax‖/‖b‖); returns the
/// solution and the iteration count. `x0` seeds a warm start.
pub fn pcg<S: Scalar>(
    apply: impl Fn(&[S], &mut [S]),
    diag: &[S],
    b: &[S],
    x0: Option<&[S]>,
    tol: S,
    max_iter: usize,
) -> Result<(Vec<S>, usize)> {
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == S::zero() {
        return Ok((vec![S::zero(); n], 0));
    }
    let inv_diag: Vec<S> = diag
        .iter()
        .map(|&d| if d > S::zero() { S::one() / d } else { S::one() })
        .collect();
    let mut x = match x0 {
        Some(v) => v.to_vec(),
        None => vec![S::zero(); n],
    };
    let mut ax = vec![S::zero(); n];
    apply(&x, &mut ax);
    let mut r: Vec<S> = b.iter().zip(&ax).map(|(&bi, &ai)| bi - ai).collect();
    let mut z: Vec<S> = r.iter().zip(&inv_diag).map(|(&ri, &di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![S::zero(); n];
    for it in 0..max_iter {
        if norm2(&r) <= tol * bnorm {
            return Ok((x, it));
        }
        apply(&p, &mut q);
        let pq = dot(&p, &q);
        if !(pq > S::zero()) {
            return Err(Error::SolverFailure {
                solver: "pcg",
                iterations: it,
                residual: (norm2(&r) / bnorm).to_f64().unwrap_or(f64::NAN),
            });
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if norm2(&r) <= tol * bnorm {
        return Ok((x, max_iter));
    }
    Err(Error::SolverFailure {
        solver: "pcg",
        iterations: max_iter,
        residual: (norm2(&r) / bnorm).to_f64().unwrap_or(f64::NAN),
    })
}

/// Jacobi-preconditioned BiCGStab for a general square CSR system.
pub fn bicgstab<S: Scalar>(
    a: &Csr<S>,
    b: &[S],
    x0: Option<&[S]>,
    tol: S,
    max_iter: usize,
) -> Result<(Vec<S>, usize)> {
    let n = b.len();
    assert_eq!(a.nrows(), n);
    assert_eq!(a.ncols(), n);
    let bnorm = norm2(b);
    if bnorm == S::zero() {
        return Ok((vec![S::zero(); n], 0));
    }
    let diag = a.diagonal();
    let inv_diag: Vec<S> = diag
        .iter()
        .map(|&d| if d.abs() > S::zero() { S::one() / d } else { S::one() })
        .collect();
    let mut x = match x0 {
        Some(v) => v.to_vec(),
        None => vec![S::zero(); n],
    };
    let mut ax = vec![S::zero(); n];
    a.matvec(&x, &mut ax);
    let mut r: Vec<S> = b.iter().zip(&ax).map(|(&bi, &ai)| bi - ai).collect();
    let mut r0 = r.clone();
    let mut rho = S::one();
    let mut alpha = S::one();
    let mut omega = S::one();
    let mut fresh = true; // directions reset against the current shadow residual
    let mut restarts = 0usize;
    let mut v = vec![S::zero(); n];
    let mut p = vec![S::zero(); n];
    let mut phat = vec![S::zero(); n];
    let mut shat = vec![S::zero(); n];
    let mut t = vec![S::zero(); n];
    for it in 0..max_iter {
        let rnorm = norm2(&r);
        if rnorm <= tol * bnorm {
            return Ok((x, it));
        }
        let mut rho_new = dot(&r0, &r);
        // Near-orthogonal shadow residual: restart the recurrence instead of
        // failing (common once the residual is already small).
        if rho_new.abs() < S::epsilon() * norm2(&r0) * rnorm && !fresh {
            r0.copy_from_slice(&r);
            for vi in v.iter_mut() {
                *vi = S::zero();
            }
            for pi in p.iter_mut() {
                *pi = S::zero();
            }
            alpha = S::one();
            omega = S::one();
            rho = S::one();
            rho_new = dot(&r0, &r);
            restarts += 1;
            if restarts > 100 {
                return Err(Error::SolverFailure {
                    solver: "bicgstab",
                    iterations: it,
                    residual: (rnorm / bnorm).to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        fresh = false;
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        for i in 0..n {
            phat[i] = p[i] * inv_diag[i];
        }
        a.matvec(&phat, &mut v);
        alpha = rho / dot(&r0, &v);
        let s: Vec<S> = r.iter().zip(&v).map(|(&ri, &vi)| ri - alpha * vi).collect();
        if norm2(&s) <= tol * bnorm {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            return Ok((x, it + 1));
        }
        for i in 0..n {
            shat[i] = s[i] * inv_diag[i];
        }
        a.matvec(&shat, &mut t);
        let tt = dot(&t, &t);
        if tt == S::zero() {
            return Err(Error::SolverFailure {
                solver: "bicgstab",
                iterations: it,
                residual: (norm2(&s) / bnorm).to_f64().unwrap_or(f64::NAN),
            });
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
    }
    if norm2(&r) <= tol * bnorm {
        return Ok((x, max_iter));
    }
    Err(Error::SolverFailure {
        solver: "bicgstab",
        iterations: max_iter,
        residual: (norm2(&r) / bnorm).to_f64().unwrap_or(f64::NAN),
    })
}
