//! Second-order finite-difference stencils.
//!
//! Spatial first derivatives: central `(f_{i+1} − f_{i−1})/2h` inside, and the
//! second-order one-sided stencil `(−3f_0 + 4f_1 − f_2)/2h` (and mirror) at
//! box edges. Pure second derivatives: central three-point inside and the
//! second-order one-sided `(2f_0 − 5f_1 + 4f_2 − f_3)/h²` at edges. Mixed
//! derivatives are compositions `D_i(D_j f)` of first-derivative passes — on
//! interior nodes this reproduces the centered four-point cross — so that
//! `D_i D_j` and `D_j D_i` agree up to floating-point summation order.
//! Time derivatives use the same stencils along the level axis.
//!
//! All operators act on full bounding-box value arrays; consumers restrict to
//! active nodes afterwards.

use crate::field::{Field, SpatialField};
use crate::geometry::SpaceTimeGrid;
use crate::scalar::Scalar;

/// First derivative of raw slice values along `axis`, written into `out`.
fn d1_values<S: Scalar>(grid: &SpaceTimeGrid<S>, vals: &[S], axis: usize, out: &mut [S]) {
    let n = grid.n_nodes();
    let stride = grid.stride(axis);
    let len = grid.shape()[axis];
    let inv2h = S::lit(0.5) / grid.spacing()[axis];
    let three = S::lit(3.0);
    let four = S::lit(4.0);
    for idx in 0..n {
        let i = (idx / stride) % len;
        out[idx] = if i == 0 {
            (-three * vals[idx] + four * vals[idx + stride] - vals[idx + 2 * stride]) * inv2h
        } else if i == len - 1 {
            (three * vals[idx] - four * vals[idx - stride] + vals[idx - 2 * stride]) * inv2h
        } else {
            (vals[idx + stride] - vals[idx - stride]) * inv2h
        };
    }
}

/// Second derivative of raw slice values along `axis`, written into `out`.
fn d2_values<S: Scalar>(grid: &SpaceTimeGrid<S>, vals: &[S], axis: usize, out: &mut [S]) {
    let n = grid.n_nodes();
    let stride = grid.stride(axis);
    let len = grid.shape()[axis];
    let h = grid.spacing()[axis];
    let inv_h2 = S::one() / (h * h);
    let two = S::lit(2.0);
    let four = S::lit(4.0);
    let five = S::lit(5.0);
    for idx in 0..n {
        let i = (idx / stride) % len;
        out[idx] = if i == 0 {
            (two * vals[idx] - five * vals[idx + stride] + four * vals[idx + 2 * stride]
                - vals[idx + 3 * stride])
                * inv_h2
        } else if i == len - 1 {
            (two * vals[idx] - five * vals[idx - stride] + four * vals[idx - 2 * stride]
                - vals[idx - 3 * stride])
                * inv_h2
        } else {
            (vals[idx + stride] - two * vals[idx] + vals[idx - stride]) * inv_h2
        };
    }
}

/// First spatial derivative of a slice.
pub fn d1<S: Scalar>(f: &SpatialField<S>, axis: usize) -> SpatialField<S> {
    let grid = f.grid().clone();
    let mut out = vec![S::zero(); grid.n_nodes()];
    d1_values(&grid, f.values(), axis, &mut out);
    SpatialField::from_values(grid, out)
}

/// Pure second spatial derivative of a slice.
pub fn d2<S: Scalar>(f: &SpatialField<S>, axis: usize) -> SpatialField<S> {
    let grid = f.grid().clone();
    let mut out = vec![S::zero(); grid.n_nodes()];
    d2_values(&grid, f.values(), axis, &mut out);
    SpatialField::from_values(grid, out)
}

/// Second derivative ∂_i∂_j of a slice: dedicated stencil on the diagonal,
/// composed first-derivative passes off it.
pub fn deriv2<S: Scalar>(f: &SpatialField<S>, i: usize, j: usize) -> SpatialField<S> {
    if i == j {
        d2(f, i)
    } else {
        d1(&d1(f, j), i)
    }
}

/// Gradient of a slice.
pub fn gradient<S: Scalar>(f: &SpatialField<S>) -> Vec<SpatialField<S>> {
    (0..f.grid().dim()).map(|k| d1(f, k)).collect()
}

/// First spatial derivative of a space–time field, slice by slice.
pub fn field_d1<S: Scalar>(f: &Field<S>, axis: usize) -> Field<S> {
    let grid = f.grid().clone();
    let mut out = Field::zeros(grid.clone());
    let mut buf = vec![S::zero(); grid.n_nodes()];
    for m in 0..grid.nt() {
        d1_values(&grid, f.level_values(m), axis, &mut buf);
        out.level_values_mut(m).copy_from_slice(&buf);
    }
    out
}

/// Second spatial derivative ∂_i∂_j of a space–time field, slice by slice.
pub fn field_deriv2<S: Scalar>(f: &Field<S>, i: usize, j: usize) -> Field<S> {
    if i == j {
        let grid = f.grid().clone();
        let mut out = Field::zeros(grid.clone());
        let mut buf = vec![S::zero(); grid.n_nodes()];
        for m in 0..grid.nt() {
            d2_values(&grid, f.level_values(m), i, &mut buf);
            out.level_values_mut(m).copy_from_slice(&buf);
        }
        out
    } else {
        field_d1(&field_d1(f, j), i)
    }
}

/// Time derivative of a space–time field: central inside, second-order
/// one-sided at t = 0 and t = T.
pub fn time_d1<S: Scalar>(f: &Field<S>) -> Field<S> {
    let grid = f.grid().clone();
    let nt = grid.nt();
    let n = grid.n_nodes();
    let mut out = Field::zeros(grid.clone());
    let inv2dt = S::lit(0.5) / grid.dt();
    let three = S::lit(3.0);
    let four = S::lit(4.0);
    assert!(nt >= 3, "time derivative needs at least 3 levels");
    for m in 0..nt {
        for idx in 0..n {
            let v = if m == 0 {
                (-three * f.at(idx, 0) + four * f.at(idx, 1) - f.at(idx, 2)) * inv2dt
            } else if m == nt - 1 {
                (three * f.at(idx, nt - 1) - four * f.at(idx, nt - 2) + f.at(idx, nt - 3))
                    * inv2dt
            } else {
                (f.at(idx, m + 1) - f.at(idx, m - 1)) * inv2dt
            };
            out.set(idx, m, v);
        }
    }
    out
}

/// Outward normal derivative at a boundary node on a face orthogonal to
/// `axis` (`positive_side = true` for the x_axis = max face), one-sided
/// second order into the domain.
pub fn normal_derivative_at<S: Scalar>(
    grid: &SpaceTimeGrid<S>,
    vals: &[S],
    node: usize,
    axis: usize,
    positive_side: bool,
) -> S {
    let stride = grid.stride(axis);
    let inv2h = S::lit(0.5) / grid.spacing()[axis];
    let three = S::lit(3.0);
    let four = S::lit(4.0);
    if positive_side {
        (three * vals[node] - four * vals[node - stride] + vals[node - 2 * stride]) * inv2h
    } else {
        // Outward normal points toward negative axis: ∂_n = −∂_axis.
        -(-three * vals[node] + four * vals[node + stride] - vals[node + 2 * stride]) * inv2h
    }
}

/// Discrete Sobolev-4 surrogate of a slice: √( Σ_{k=0..4} Σ_axes ‖D_axis^k f‖²_{L₂} )
/// with repeated first-difference passes (used to calibrate data-noise size).
pub fn sobolev4<S: Scalar>(f: &SpatialField<S>) -> S {
    let mut acc = f.l2().powi(2);
    for axis in 0..f.grid().dim() {
        let mut d = f.clone();
        for _ in 0..4 {
            d = d1(&d, axis);
            acc += d.l2().powi(2);
        }
    }
    acc.sqrt()
}
