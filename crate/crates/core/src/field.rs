//! Grid functions: spatial slices and full space–time fields.
//!
//! Values are stored for every node of the bounding box (including nodes
//! outside a staircase domain) so that stencils always have operands;
//! integrals and norms only ever sum over active nodes. Fields share their
//! grid through an `Arc`.

use crate::geometry::SpaceTimeGrid;
use crate::scalar::Scalar;
use std::sync::Arc;

/// A function sampled on one time slice.
#[derive(Debug, Clone)]
pub struct SpatialField<S> {
    grid: Arc<SpaceTimeGrid<S>>,
    values: Vec<S>,
}

impl<S: Scalar> SpatialField<S> {
    /// All-zero slice.
    pub fn zeros(grid: Arc<SpaceTimeGrid<S>>) -> Self {
        let n = grid.n_nodes();
        Self { grid, values: vec![S::zero(); n] }
    }

    /// Sample a coordinate function on every box node.
    pub fn from_fn(grid: Arc<SpaceTimeGrid<S>>, f: impl Fn(&[S]) -> S) -> Self {
        let n = grid.n_nodes();
        let mut values = Vec::with_capacity(n);
        let mut x = vec![S::zero(); grid.dim()];
        for idx in 0..n {
            grid.node_coords_into(idx, &mut x);
            values.push(f(&x));
        }
        Self { grid, values }
    }

    /// Wrap raw values (length must equal the box node count).
    pub fn from_values(grid: Arc<SpaceTimeGrid<S>>, values: Vec<S>) -> Self {
        assert_eq!(values.len(), grid.n_nodes(), "value/grid size mismatch");
        Self { grid, values }
    }

    #[inline]
    pub fn grid(&self) -> &Arc<SpaceTimeGrid<S>> {
        &self.grid
    }

    #[inline]
    pub fn at(&self, node: usize) -> S {
        self.values[node]
    }

    #[inline]
    pub fn set(&mut self, node: usize, v: S) {
        self.values[node] = v;
    }

    #[inline]
    pub fn values(&self) -> &[S] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    /// Pointwise map into a new slice.
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise combination of two slices on the same grid.
    pub fn zip(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert!(Arc::ptr_eq(&self.grid, &other.grid), "slices from different grids");
        Self {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// max |v| over active nodes.
    pub fn linf(&self) -> S {
        self.grid
            .active_nodes()
            .iter()
            .map(|&i| self.values[i].abs())
            .fold(S::zero(), S::max)
    }

    /// Quadrature-weighted L₂ norm over active nodes.
    pub fn l2(&self) -> S {
        self.grid
            .active_nodes()
            .iter()
            .map(|&i| self.grid.quad_weight(i) * self.values[i] * self.values[i])
            .sum::<S>()
            .sqrt()
    }

    /// Quadrature-weighted integral over active nodes.
    pub fn integral(&self) -> S {
        self.grid
            .active_nodes()
            .iter()
            .map(|&i| self.grid.quad_weight(i) * self.values[i])
            .sum()
    }

    /// L₂ norm restricted to the nodes selected by `mask`.
    pub fn l2_where(&self, mask: impl Fn(usize) -> bool) -> S {
        self.grid
            .active_nodes()
            .iter()
            .filter(|&&i| mask(i))
            .map(|&i| self.grid.quad_weight(i) * self.values[i] * self.values[i])
            .sum::<S>()
            .sqrt()
    }
}

/// A function sampled on every (node, time level) pair.
#[derive(Debug, Clone)]
pub struct Field<S> {
    grid: Arc<SpaceTimeGrid<S>>,
    values: Vec<S>, // level-major: index = level * n_nodes + node
}

impl<S: Scalar> Field<S> {
    /// All-zero field.
    pub fn zeros(grid: Arc<SpaceTimeGrid<S>>) -> Self {
        let n = grid.n_nodes() * grid.nt();
        Self { grid, values: vec![S::zero(); n] }
    }

    /// Sample a space–time function on every (box node, level).
    pub fn from_fn(grid: Arc<SpaceTimeGrid<S>>, f: impl Fn(&[S], S) -> S) -> Self {
        let n = grid.n_nodes();
        let mut values = Vec::with_capacity(n * grid.nt());
        let mut x = vec![S::zero(); grid.dim()];
        for m in 0..grid.nt() {
            let t = grid.time(m);
            for idx in 0..n {
                grid.node_coords_into(idx, &mut x);
                values.push(f(&x, t));
            }
        }
        Self { grid, values }
    }

    #[inline]
    pub fn grid(&self) -> &Arc<SpaceTimeGrid<S>> {
        &self.grid
    }

    #[inline]
    pub fn at(&self, node: usize, level: usize) -> S {
        self.values[level * self.grid.n_nodes() + node]
    }

    #[inline]
    pub fn set(&mut self, node: usize, level: usize, v: S) {
        self.values[level * self.grid.n_nodes() + node] = v;
    }

    /// Borrow one time slice's values.
    #[inline]
    pub fn level_values(&self, level: usize) -> &[S] {
        let n = self.grid.n_nodes();
        &self.values[level * n..(level + 1) * n]
    }

    /// Mutable borrow of one time slice's values.
    #[inline]
    pub fn level_values_mut(&mut self, level: usize) -> &mut [S] {
        let n = self.grid.n_nodes();
        &mut self.values[level * n..(level + 1) * n]
    }

    /// Copy one time slice out as a [`SpatialField`].
    pub fn slice(&self, level: usize) -> SpatialField<S> {
        SpatialField::from_values(self.grid.clone(), self.level_values(level).to_vec())
    }

    /// Overwrite one time slice.
    pub fn set_slice(&mut self, level: usize, s: &SpatialField<S>) {
        self.level_values_mut(level).copy_from_slice(s.values());
    }

    #[inline]
    pub fn values(&self) -> &[S] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    /// Pointwise map into a new field.
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise combination of two fields on the same grid.
    pub fn zip(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert!(Arc::ptr_eq(&self.grid, &other.grid), "fields from different grids");
        Self {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// max |v| over active nodes and all levels.
    pub fn linf(&self) -> S {
        let mut m = S::zero();
        for lvl in 0..self.grid.nt() {
            let vals = self.level_values(lvl);
            for &i in self.grid.active_nodes() {
                m = m.max(vals[i].abs());
            }
        }
        m
    }

    /// Space–time L₂ norm (trapezoid in time, domain quadrature in space).
    pub fn l2(&self) -> S {
        let mut acc = S::zero();
        for lvl in 0..self.grid.nt() {
            let tw = self.grid.time_weight(lvl);
            let vals = self.level_values(lvl);
            for &i in self.grid.active_nodes() {
                acc += tw * self.grid.quad_weight(i) * vals[i] * vals[i];
            }
        }
        acc.sqrt()
    }
}

/// Values recorded on a fixed set of boundary nodes across all time levels
/// (level-major: entry `m * nodes.len() + k` is node `nodes[k]` at level `m`).
#[derive(Debug, Clone)]
pub struct Trace<S> {
    grid: Arc<SpaceTimeGrid<S>>,
    nodes: Vec<usize>,
    values: Vec<S>,
}

impl<S: Scalar> Trace<S> {
    /// Zero-valued trace over the given boundary node set.
    pub fn zeros(grid: Arc<SpaceTimeGrid<S>>, nodes: Vec<usize>) -> Self {
        let len = nodes.len() * grid.nt();
        Self { grid, nodes, values: vec![S::zero(); len] }
    }

    /// Sample `f(x, t)` on every (trace node, time level) pair.
    pub fn from_fn(
        grid: Arc<SpaceTimeGrid<S>>,
        nodes: Vec<usize>,
        f: impl Fn(&[S], S) -> S,
    ) -> Self {
        let mut tr = Self::zeros(grid, nodes);
        let mut x = vec![S::zero(); tr.grid.dim()];
        for m in 0..tr.grid.nt() {
            let t = tr.grid.time(m);
            for k in 0..tr.nodes.len() {
                tr.grid.node_coords_into(tr.nodes[k], &mut x);
                tr.values[m * tr.nodes.len() + k] = f(&x, t);
            }
        }
        tr
    }

    /// Restrict a space–time field to the trace node set.
    pub fn restrict(field: &Field<S>, nodes: Vec<usize>) -> Self {
        let grid = field.grid().clone();
        let mut tr = Self::zeros(grid, nodes);
        for m in 0..tr.grid.nt() {
            let lvl = field.level_values(m);
            for k in 0..tr.nodes.len() {
                tr.values[m * tr.nodes.len() + k] = lvl[tr.nodes[k]];
            }
        }
        tr
    }

    #[inline]
    pub fn grid(&self) -> &Arc<SpaceTimeGrid<S>> {
        &self.grid
    }

    #[inline]
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Value at trace-node index `k`, time level `m`.
    #[inline]
    pub fn at(&self, k: usize, m: usize) -> S {
        self.values[m * self.nodes.len() + k]
    }

    #[inline]
    pub fn set(&mut self, k: usize, m: usize, v: S) {
        self.values[m * self.nodes.len() + k] = v;
    }

    #[inline]
    pub fn values(&self) -> &[S] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn zip(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.nodes, other.nodes, "traces must share a node set");
        let values =
            self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Self { grid: self.grid.clone(), nodes: self.nodes.clone(), values }
    }

    /// Surface measure attached to trace node `k` (product of spacings over
    /// the axes tangent to its face; 1 for a point face in one dimension).
    fn surface_weight(&self, k: usize) -> S {
        let node = self.nodes[k];
        match self.grid.status(node) {
            crate::geometry::SpatialStatus::Boundary(tag) => {
                if let Some((axis, _)) = tag.face_axis_side() {
                    self.grid.face_weight(node, axis)
                } else {
                    // Staircase node: use the cell area divided by a spacing
                    // as a flat-face surrogate.
                    self.grid.face_weight(node, 0)
                }
            }
            _ => self.grid.face_weight(node, 0),
        }
    }

    /// Discrete L₂ norm over the trace (surface measure × time trapezoid).
    pub fn l2(&self) -> S {
        let mut acc = S::zero();
        for m in 0..self.grid.nt() {
            let tw = self.grid.time_weight(m);
            for k in 0..self.nodes.len() {
                let v = self.at(k, m);
                acc += tw * self.surface_weight(k) * v * v;
            }
        }
        acc.sqrt()
    }

    /// Discrete H¹ norm over the trace: the L₂ norm plus the L₂ norm of the
    /// time derivative (central differences, one-sided at the ends). Traces
    /// in one space dimension have point faces, so no tangential term.
    pub fn h1(&self) -> S {
        let l2 = self.l2();
        let dt = self.grid.dt();
        let nt = self.grid.nt();
        let mut acc = S::zero();
        let half = S::lit(0.5);
        for m in 0..nt {
            let tw = self.grid.time_weight(m);
            for k in 0..self.nodes.len() {
                let d = if m == 0 {
                    (self.at(k, 1) - self.at(k, 0)) / dt
                } else if m == nt - 1 {
                    (self.at(k, nt - 1) - self.at(k, nt - 2)) / dt
                } else {
                    (self.at(k, m + 1) - self.at(k, m - 1)) * half / dt
                };
                acc += tw * self.surface_weight(k) * d * d;
            }
        }
        (l2 * l2 + acc).sqrt()
    }
}
