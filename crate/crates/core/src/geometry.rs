//! Domains, space–time grids, and boundary tagging.
//!
//! The domain family is carved out of the level function
//!
//! ```text
//!     ψ(x) = x₁ + |x̄|²/2 + 1/4,          x̄ = (x₂, …, x_n),
//! ```
//!
//! * `ParaboloidG`      — G    = { 1/4 < ψ < 3/4, x₁ > 0 },
//! * `ParaboloidGEps(ε)`— G_ε  = { ψ < 3/4 − ε,  x₁ > 0 },  ε ∈ (0, 1/2),
//! * `PrismOmega`       — Ω    = { x₁ ∈ (0, 1/4), |x_i| < 1/(2√(n−1)) } ⊂ G,
//! * `Interval1D(a,b)`  — generic 1-D slab (a, b) with the same ψ convention.
//!
//! Grids are uniform tensor products over the domain's bounding box with a
//! fixed node count per axis. Nodes are `Outside`, `Interior`, or tagged
//! boundary nodes. The data face Γ is the x₁ = 0 face; prism faces are exact
//! grid planes; the paraboloid's curved lateral boundary is realized as a
//! staircase (in-domain nodes with an out-of-domain stencil neighbor).
//! Tag precedence: Γ > faces (ascending axis, plus before minus) > staircase.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Level function ψ(x) = x₁ + |x̄|²/2 + 1/4.
#[inline]
pub fn level<S: Scalar>(x: &[S]) -> S {
    let quarter = S::lit(0.25);
    let half = S::lit(0.5);
    let mut tail = S::zero();
    for &xi in &x[1..] {
        tail += xi * xi;
    }
    x[0] + half * tail + quarter
}

/// Spatial gradient of ψ: (1, x₂, …, x_n).
#[inline]
pub fn level_gradient<S: Scalar>(x: &[S], out: &mut [S]) {
    out[0] = S::one();
    for (o, &xi) in out[1..].iter_mut().zip(&x[1..]) {
        *o = xi;
    }
}

/// Hessian of ψ is diag(0, 1, …, 1); returns the (k,k) entry.
#[inline]
pub fn level_hessian_diag<S: Scalar>(k: usize) -> S {
    if k == 0 {
        S::zero()
    } else {
        S::one()
    }
}

/// Shape of the spatial domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainKind<S> {
    /// G = { 1/4 < ψ < 3/4, x₁ > 0 }.
    ParaboloidG,
    /// G_ε = { ψ < 3/4 − ε, x₁ > 0 }.
    ParaboloidGEps(S),
    /// Ω = { x₁ ∈ (0, 1/4), |x_i| < 1/(2√(n−1)) }.
    PrismOmega,
    /// (a, b) on the x₁ axis.
    Interval1D(S, S),
}

/// A spatial domain: a shape plus its dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain<S> {
    kind: DomainKind<S>,
    dim: usize,
}

impl<S: Scalar> Domain<S> {
    /// The paraboloid slab G in `dim` ≥ 1 dimensions.
    pub fn paraboloid(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        Ok(Self { kind: DomainKind::ParaboloidG, dim })
    }

    /// The shrunken slab G_ε, ε ∈ (0, 1/2).
    pub fn paraboloid_eps(dim: usize, eps: S) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        if eps <= S::zero() || eps >= S::lit(0.5) {
            return Err(Error::Precondition(format!(
                "eps must lie in (0, 1/2), got {eps}"
            )));
        }
        Ok(Self { kind: DomainKind::ParaboloidGEps(eps), dim })
    }

    /// The prism Ω ⊂ G.
    pub fn prism(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        Ok(Self { kind: DomainKind::PrismOmega, dim })
    }

    /// A 1-D interval (a, b) with 0 ≤ a < b.
    pub fn interval(a: S, b: S) -> Result<Self> {
        if !(a >= S::zero() && b > a) {
            return Err(Error::Precondition(format!(
                "interval needs 0 <= a < b, got a = {a}, b = {b}"
            )));
        }
        Ok(Self { kind: DomainKind::Interval1D(a, b), dim: 1 })
    }

    /// Spatial dimension n.
    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Shape descriptor.
    #[inline]
    pub fn kind(&self) -> DomainKind<S> {
        self.kind
    }

    /// Prism half-width 1/(2√(n−1)) along the transverse axes (n ≥ 2).
    pub fn prism_half_width(&self) -> S {
        debug_assert!(self.dim >= 2);
        S::lit(0.5) / S::of(self.dim - 1).sqrt()
    }

    /// Upper ψ level bounding the domain, where one exists.
    pub fn level_max(&self) -> Option<S> {
        match self.kind {
            DomainKind::ParaboloidG => Some(S::lit(0.75)),
            DomainKind::ParaboloidGEps(eps) => Some(S::lit(0.75) - eps),
            _ => None,
        }
    }

    /// Largest ψ value attained on the closure (used by weight extrema).
    pub fn level_sup(&self) -> S {
        match self.kind {
            DomainKind::ParaboloidG => S::lit(0.75),
            DomainKind::ParaboloidGEps(eps) => S::lit(0.75) - eps,
            // Corner of the prism: x₁ = 1/4 and |x̄|²/2 = 1/8 (any n ≥ 2),
            // hence ψ = 1/4 + 1/8 + 1/4 = 5/8; in 1-D, ψ = 1/4 + 1/4 = 1/2.
            DomainKind::PrismOmega => {
                if self.dim == 1 {
                    S::lit(0.5)
                } else {
                    S::lit(0.625)
                }
            }
            DomainKind::Interval1D(_, b) => b + S::lit(0.25),
        }
    }

    /// Smallest ψ value attained on the closure.
    pub fn level_inf(&self) -> S {
        match self.kind {
            DomainKind::Interval1D(a, _) => a + S::lit(0.25),
            _ => S::lit(0.25),
        }
    }

    /// Strict membership in the open domain.
    pub fn contains(&self, x: &[S]) -> bool {
        if x.len() != self.dim {
            return false;
        }
        match self.kind {
            DomainKind::ParaboloidG => x[0] > S::zero() && level(x) < S::lit(0.75),
            DomainKind::ParaboloidGEps(eps) => {
                x[0] > S::zero() && level(x) < S::lit(0.75) - eps
            }
            DomainKind::PrismOmega => {
                if !(x[0] > S::zero() && x[0] < S::lit(0.25)) {
                    return false;
                }
                if self.dim >= 2 {
                    let w = self.prism_half_width();
                    for &xi in &x[1..] {
                        if !(xi > -w && xi < w) {
                            return false;
                        }
                    }
                }
                true
            }
            DomainKind::Interval1D(a, b) => x[0] > a && x[0] < b,
        }
    }

    /// Axis-aligned bounding box (lo, hi) per axis.
    pub fn bounding_box(&self) -> (Vec<S>, Vec<S>) {
        match self.kind {
            DomainKind::ParaboloidG => {
                let mut lo = vec![S::zero(); self.dim];
                let mut hi = vec![S::one(); self.dim];
                hi[0] = S::lit(0.5);
                for k in 1..self.dim {
                    lo[k] = -S::one();
                    hi[k] = S::one();
                }
                (lo, hi)
            }
            DomainKind::ParaboloidGEps(eps) => {
                // ψ < 3/4 − ε at x̄ = 0 gives x₁ < 1/2 − ε; at x₁ = 0 the
                // transverse reach is |x̄| < √(1 − 2ε).
                let reach = (S::one() - S::lit(2.0) * eps).sqrt();
                let mut lo = vec![S::zero(); self.dim];
                let mut hi = vec![S::lit(0.5) - eps; self.dim];
                for k in 1..self.dim {
                    lo[k] = -reach;
                    hi[k] = reach;
                }
                (lo, hi)
            }
            DomainKind::PrismOmega => {
                let mut lo = vec![S::zero(); self.dim];
                let mut hi = vec![S::lit(0.25); self.dim];
                if self.dim >= 2 {
                    let w = self.prism_half_width();
                    for k in 1..self.dim {
                        lo[k] = -w;
                        hi[k] = w;
                    }
                }
                (lo, hi)
            }
            DomainKind::Interval1D(a, b) => (vec![a], vec![b]),
        }
    }

    /// Whether the bounding-box grid covers the domain exactly (no staircase).
    pub fn is_box(&self) -> bool {
        matches!(
            self.kind,
            DomainKind::PrismOmega | DomainKind::Interval1D(_, _)
        )
    }
}

/// Boundary tag for a space–time node.
///
/// Face indices are 1-based to match the coordinate naming (x₁, x₂, …):
/// `PrismFacePlus(1)` is the far face x₁ = 1/4 (or x₁ = b on an interval);
/// `PrismFacePlus(i)`/`PrismFaceMinus(i)` for i ≥ 2 are x_i = ±1/(2√(n−1)).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    /// Data face Γ: x₁ = 0.
    Gamma,
    /// Staircase realization of the curved lateral boundary { ψ = level max }.
    LateralCurved,
    /// Box face x_i = +(face extent).
    PrismFacePlus(usize),
    /// Box face x_i = −(face extent).
    PrismFaceMinus(usize),
    /// Time slice t = 0.
    Initial,
    /// Time slice t = T.
    Terminal,
    /// Not a boundary node.
    Interior,
}

impl BoundaryTag {
    /// Axis and side of a flat box face: `(axis, outward_is_plus)`.
    /// `None` for staircase, time, and interior tags.
    pub fn face_axis_side(self) -> Option<(usize, bool)> {
        match self {
            BoundaryTag::Gamma => Some((0, false)),
            BoundaryTag::PrismFacePlus(i) => Some((i - 1, true)),
            BoundaryTag::PrismFaceMinus(i) => Some((i - 1, false)),
            _ => None,
        }
    }
}

/// Which part of the lateral boundary carries measured Cauchy data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataBoundary {
    /// Only the flat face Γ = {x₁ = 0}.
    GammaOnly,
    /// The entire lateral boundary.
    FullLateral,
}

/// Spatial classification of a grid node (time-independent part).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialStatus {
    /// Outside the domain closure; carries no unknowns or data.
    Outside,
    /// Strictly inside the domain with all stencil neighbors active.
    Interior,
    /// On the spatial boundary with the given tag.
    Boundary(BoundaryTag),
}

impl SpatialStatus {
    /// Node participates in the discrete domain (interior or boundary).
    #[inline]
    pub fn is_active(self) -> bool {
        !matches!(self, SpatialStatus::Outside)
    }
}

/// Uniform tensor-product grid over the domain's bounding box, with `nt`
/// time levels on [0, T].
#[derive(Debug, Clone)]
pub struct SpaceTimeGrid<S> {
    domain: Domain<S>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    h: Vec<S>,
    origin: Vec<S>,
    n_nodes: usize,
    t_final: S,
    nt: usize,
    dt: S,
    status: Vec<SpatialStatus>,
    active: Vec<usize>,
    interior: Vec<usize>,
    quad: Vec<S>,
}

impl<S: Scalar> SpaceTimeGrid<S> {
    /// Build a grid with `resolution` nodes per spatial axis and `nt` time
    /// levels on [0, `t_final`].
    pub fn build(domain: Domain<S>, resolution: usize, t_final: S, nt: usize) -> Result<Self> {
        if resolution < 5 {
            return Err(Error::ResolutionTooSmall { min: 5, got: resolution });
        }
        if nt < 2 {
            return Err(Error::TimeLevelsTooSmall { min: 2, got: nt });
        }
        if !(t_final > S::zero()) {
            return Err(Error::Precondition(format!(
                "final time must be positive, got {t_final}"
            )));
        }
        let n = domain.dim();
        let (lo, hi) = domain.bounding_box();
        let shape = vec![resolution; n];
        let mut strides = vec![0usize; n];
        let mut acc = 1usize;
        for k in (0..n).rev() {
            strides[k] = acc;
            acc *= shape[k];
        }
        let n_nodes = acc;
        let h: Vec<S> = (0..n)
            .map(|k| (hi[k] - lo[k]) / S::of(resolution - 1))
            .collect();
        let dt = t_final / S::of(nt - 1);

        let mut grid = Self {
            domain,
            shape,
            strides,
            h,
            origin: lo,
            n_nodes,
            t_final,
            nt,
            dt,
            status: vec![SpatialStatus::Outside; n_nodes],
            active: Vec::new(),
            interior: Vec::new(),
            quad: vec![S::zero(); n_nodes],
        };
        grid.classify_nodes();
        grid.assign_quadrature();
        Ok(grid)
    }

    fn classify_nodes(&mut self) {
        let n = self.dim();
        if self.domain.is_box() {
            // Every box node is in the closure; faces are exact index planes.
            for idx in 0..self.n_nodes {
                let mi = self.multi_index(idx);
                let tag = self.box_face_tag(&mi);
                self.status[idx] = match tag {
                    BoundaryTag::Interior => SpatialStatus::Interior,
                    t => SpatialStatus::Boundary(t),
                };
            }
        } else {
            let psi_max = self.domain.level_max().expect("curved domains have a level cap");
            let tol_x = self.h[0] * S::lit(1e-9);
            let tol_psi = S::lit(1e-12);
            // First pass: inside / Γ / outside by strict inequalities.
            let mut x = vec![S::zero(); n];
            for idx in 0..self.n_nodes {
                self.node_coords_into(idx, &mut x);
                let psi = level(&x);
                let below_cap = psi < psi_max - tol_psi;
                self.status[idx] = if x[0] > tol_x && below_cap {
                    SpatialStatus::Interior // provisional; staircase pass follows
                } else if x[0].abs() <= tol_x && below_cap {
                    SpatialStatus::Boundary(BoundaryTag::Gamma)
                } else {
                    SpatialStatus::Outside
                };
            }
            // Second pass: in-domain nodes with an out-of-domain stencil
            // neighbor become the staircase lateral boundary.
            let snapshot = self.status.clone();
            for idx in 0..self.n_nodes {
                if snapshot[idx] != SpatialStatus::Interior {
                    continue;
                }
                let mi = self.multi_index(idx);
                let mut curved = false;
                'axes: for k in 0..n {
                    for dir in [-1isize, 1] {
                        let j = mi[k] as isize + dir;
                        if j < 0 || j >= self.shape[k] as isize {
                            curved = true;
                            break 'axes;
                        }
                        let nb = (idx as isize + dir * self.strides[k] as isize) as usize;
                        if snapshot[nb] == SpatialStatus::Outside {
                            curved = true;
                            break 'axes;
                        }
                    }
                }
                if curved {
                    self.status[idx] = SpatialStatus::Boundary(BoundaryTag::LateralCurved);
                }
            }
        }
        self.active = (0..self.n_nodes)
            .filter(|&i| self.status[i].is_active())
            .collect();
        self.interior = (0..self.n_nodes)
            .filter(|&i| self.status[i] == SpatialStatus::Interior)
            .collect();
    }

    /// Face tag for a box-domain node. Precedence: Γ first, then faces by
    /// ascending axis with plus before minus.
    fn box_face_tag(&self, mi: &[usize]) -> BoundaryTag {
        let n = self.dim();
        if mi[0] == 0 {
            return BoundaryTag::Gamma;
        }
        for k in 0..n {
            if mi[k] == self.shape[k] - 1 {
                return BoundaryTag::PrismFacePlus(k + 1);
            }
            if k > 0 && mi[k] == 0 {
                return BoundaryTag::PrismFaceMinus(k + 1);
            }
        }
        BoundaryTag::Interior
    }

    fn assign_quadrature(&mut self) {
        let n = self.dim();
        if self.domain.is_box() {
            for &idx in &self.active {
                let mi = self.multi_index(idx);
                let mut w = S::one();
                for k in 0..n {
                    let end = mi[k] == 0 || mi[k] == self.shape[k] - 1;
                    w *= if end { self.h[k] * S::lit(0.5) } else { self.h[k] };
                }
                self.quad[idx] = w;
            }
        } else {
            // Staircase cells: one flat cell volume per active node
            // (first-order boundary quadrature, per the staircase realization).
            let cell: S = self.h.iter().copied().fold(S::one(), |a, b| a * b);
            for &idx in &self.active {
                self.quad[idx] = cell;
            }
        }
    }

    /// Domain the grid discretizes.
    #[inline]
    pub fn domain(&self) -> &Domain<S> {
        &self.domain
    }

    /// Spatial dimension n.
    #[inline]
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Nodes per axis.
    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Spacing per axis.
    #[inline]
    pub fn spacing(&self) -> &[S] {
        &self.h
    }

    /// Largest spacing over the axes.
    pub fn max_spacing(&self) -> S {
        self.h.iter().copied().fold(S::zero(), S::max)
    }

    /// Total spatial nodes in the bounding box.
    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Number of time levels.
    #[inline]
    pub fn nt(&self) -> usize {
        self.nt
    }

    /// Time step.
    #[inline]
    pub fn dt(&self) -> S {
        self.dt
    }

    /// Final time T.
    #[inline]
    pub fn t_final(&self) -> S {
        self.t_final
    }

    /// Time of level m.
    #[inline]
    pub fn time(&self, m: usize) -> S {
        self.dt * S::of(m)
    }

    /// Trapezoid weight of time level m.
    #[inline]
    pub fn time_weight(&self, m: usize) -> S {
        if m == 0 || m == self.nt - 1 {
            self.dt * S::lit(0.5)
        } else {
            self.dt
        }
    }

    /// Multi-index of a linear node index.
    pub fn multi_index(&self, idx: usize) -> Vec<usize> {
        let mut mi = vec![0usize; self.dim()];
        let mut rest = idx;
        for k in 0..self.dim() {
            mi[k] = rest / self.strides[k];
            rest %= self.strides[k];
        }
        mi
    }

    /// Linear index of a multi-index.
    #[inline]
    pub fn linear_index(&self, mi: &[usize]) -> usize {
        mi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Stride of an axis (linear-index step for +1 along that axis).
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    /// Coordinate of grid line `i` on `axis`.
    #[inline]
    pub fn coord(&self, axis: usize, i: usize) -> S {
        self.origin[axis] + self.h[axis] * S::of(i)
    }

    /// Coordinates of a node, written into `out`.
    pub fn node_coords_into(&self, idx: usize, out: &mut [S]) {
        let mut rest = idx;
        for k in 0..self.dim() {
            let i = rest / self.strides[k];
            rest %= self.strides[k];
            out[k] = self.coord(k, i);
        }
    }

    /// Coordinates of a node.
    pub fn node_coords(&self, idx: usize) -> Vec<S> {
        let mut out = vec![S::zero(); self.dim()];
        self.node_coords_into(idx, &mut out);
        out
    }

    /// Spatial status of a node.
    #[inline]
    pub fn status(&self, idx: usize) -> SpatialStatus {
        self.status[idx]
    }

    /// Whether the node belongs to the discrete domain closure.
    #[inline]
    pub fn is_active(&self, idx: usize) -> bool {
        self.status[idx].is_active()
    }

    /// Nodes in the discrete closure (interior + spatial boundary).
    #[inline]
    pub fn active_nodes(&self) -> &[usize] {
        &self.active
    }

    /// Strictly interior nodes.
    #[inline]
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }

    /// Spatial boundary nodes with their tags.
    pub fn boundary_nodes(&self) -> Vec<(usize, BoundaryTag)> {
        self.active
            .iter()
            .filter_map(|&i| match self.status[i] {
                SpatialStatus::Boundary(t) => Some((i, t)),
                _ => None,
            })
            .collect()
    }

    /// Nodes on the data face Γ.
    pub fn gamma_nodes(&self) -> Vec<usize> {
        self.active
            .iter()
            .copied()
            .filter(|&i| self.status[i] == SpatialStatus::Boundary(BoundaryTag::Gamma))
            .collect()
    }

    /// All lateral boundary nodes (Γ + faces + staircase).
    pub fn lateral_nodes(&self) -> Vec<usize> {
        self.boundary_nodes().into_iter().map(|(i, _)| i).collect()
    }

    /// Boundary nodes carrying measured data under the given mode.
    pub fn data_nodes(&self, mode: DataBoundary) -> Vec<usize> {
        match mode {
            DataBoundary::GammaOnly => self.gamma_nodes(),
            DataBoundary::FullLateral => self.lateral_nodes(),
        }
    }

    /// Full space–time classification. Time tags take precedence: every node
    /// at t = 0 is `Initial`, at t = T `Terminal`.
    pub fn classify(&self, node: usize, time_level: usize) -> Result<BoundaryTag> {
        if node >= self.n_nodes || !self.status[node].is_active() {
            return Err(Error::Precondition(format!(
                "node {node} is not in the discrete domain"
            )));
        }
        if time_level >= self.nt {
            return Err(Error::Precondition(format!(
                "time level {time_level} out of range (nt = {})",
                self.nt
            )));
        }
        if time_level == 0 {
            return Ok(BoundaryTag::Initial);
        }
        if time_level == self.nt - 1 {
            return Ok(BoundaryTag::Terminal);
        }
        Ok(match self.status[node] {
            SpatialStatus::Boundary(t) => t,
            _ => BoundaryTag::Interior,
        })
    }

    /// Spatial quadrature weight of a node (0 outside the domain).
    #[inline]
    pub fn quad_weight(&self, idx: usize) -> S {
        self.quad[idx]
    }

    /// Surface quadrature weight of a boundary node on a face orthogonal to
    /// `axis` (product of tangential trapezoid weights).
    pub fn face_weight(&self, idx: usize, axis: usize) -> S {
        let mi = self.multi_index(idx);
        let mut w = S::one();
        for k in 0..self.dim() {
            if k == axis {
                continue;
            }
            let end = mi[k] == 0 || mi[k] == self.shape[k] - 1;
            w *= if end { self.h[k] * S::lit(0.5) } else { self.h[k] };
        }
        w
    }

    /// Total discrete volume (sum of quadrature weights).
    pub fn volume(&self) -> S {
        self.active.iter().map(|&i| self.quad[i]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_1d(res: usize) -> SpaceTimeGrid<f64> {
        let d = Domain::interval(0.0, 0.25).unwrap();
        SpaceTimeGrid::build(d, res, 1.0, 11).unwrap()
    }

    #[test]
    fn level_values_match_hand_computation() {
        // ψ(0) = 1/4; ψ((1/2, 0)) = 3/4; ψ((1/4, 1/2)) = 1/4 + 1/8 + 1/4.
        assert_eq!(level(&[0.0, 0.0]), 0.25);
        assert_eq!(level(&[0.5, 0.0]), 0.75);
        assert_eq!(level(&[0.25, 0.5]), 0.625);
        assert_eq!(level(&[0.0]), 0.25);
    }

    #[test]
    fn interval_grid_spacing_matches_contract() {
        let g = grid_1d(9);
        assert_eq!(g.spacing()[0], 1.0 / 32.0);
        assert!((g.dt() - 0.1).abs() < 1e-15);
        assert_eq!(g.shape(), &[9]);
        assert_eq!(g.active_nodes().len(), 9);
        assert_eq!(g.interior_nodes().len(), 7);
    }

    #[test]
    fn interval_endpoints_partition_gamma_and_far_face() {
        let g = grid_1d(9);
        assert_eq!(g.status(0), SpatialStatus::Boundary(BoundaryTag::Gamma));
        assert_eq!(
            g.status(8),
            SpatialStatus::Boundary(BoundaryTag::PrismFacePlus(1))
        );
    }

    #[test]
    fn resolution_floor_is_enforced() {
        let d = Domain::interval(0.0, 0.25).unwrap();
        let err = SpaceTimeGrid::build(d, 4, 1.0, 11).unwrap_err();
        assert!(matches!(err, Error::ResolutionTooSmall { min: 5, got: 4 }));
    }

    #[test]
    fn time_tags_take_precedence() {
        let g = grid_1d(9);
        assert_eq!(g.classify(0, 0).unwrap(), BoundaryTag::Initial);
        assert_eq!(g.classify(3, 0).unwrap(), BoundaryTag::Initial);
        assert_eq!(g.classify(0, 10).unwrap(), BoundaryTag::Terminal);
        assert_eq!(g.classify(0, 5).unwrap(), BoundaryTag::Gamma);
        assert_eq!(g.classify(3, 5).unwrap(), BoundaryTag::Interior);
    }

    #[test]
    fn prism_grid_partitions_boundary_exhaustively() {
        let d = Domain::prism(2).unwrap();
        let g = SpaceTimeGrid::build(d, 9, 1.0, 6).unwrap();
        // Box domain: all nodes active, each with exactly one classification.
        assert_eq!(g.active_nodes().len(), 81);
        let mut gamma = 0;
        let mut faces = 0;
        let mut interior = 0;
        for idx in 0..g.n_nodes() {
            match g.status(idx) {
                SpatialStatus::Boundary(BoundaryTag::Gamma) => gamma += 1,
                SpatialStatus::Boundary(BoundaryTag::PrismFacePlus(_))
                | SpatialStatus::Boundary(BoundaryTag::PrismFaceMinus(_)) => faces += 1,
                SpatialStatus::Interior => interior += 1,
                s => panic!("unexpected status {s:?}"),
            }
        }
        assert_eq!(gamma, 9); // the whole x₁ = 0 face, corners included
        assert_eq!(interior, 7 * 7);
        assert_eq!(gamma + faces + interior, 81);
    }

    #[test]
    fn prism_corners_prefer_gamma_then_lowest_axis() {
        let d = Domain::prism(2).unwrap();
        let g = SpaceTimeGrid::build(d, 9, 1.0, 6).unwrap();
        // Corner x₁ = 0, x₂ = +w: Γ wins.
        let corner = g.linear_index(&[0, 8]);
        assert_eq!(g.status(corner), SpatialStatus::Boundary(BoundaryTag::Gamma));
        // Corner x₁ = 1/4, x₂ = +w: far face (axis 1, plus) wins over axis 2.
        let far = g.linear_index(&[8, 8]);
        assert_eq!(
            g.status(far),
            SpatialStatus::Boundary(BoundaryTag::PrismFacePlus(1))
        );
    }

    #[test]
    fn prism_nodes_lie_in_paraboloid_closure() {
        // Ω ⊂ G: every active prism node is in G or on its closure.
        for dim in 1..=3usize {
            let prism = Domain::prism(dim).unwrap();
            let g = SpaceTimeGrid::build(prism, 7, 1.0, 4).unwrap();
            let parab = Domain::paraboloid(dim).unwrap();
            for &idx in g.active_nodes() {
                let x = g.node_coords(idx);
                let psi = level(&x);
                assert!(x[0] >= 0.0 && psi <= 0.75 + 1e-14, "node {x:?} escapes G");
                if g.status(idx) == SpatialStatus::Interior {
                    assert!(parab.contains(&x), "interior node {x:?} not in open G");
                }
            }
        }
    }

    #[test]
    fn paraboloid_interior_nodes_respect_strict_level_bounds() {
        let d = Domain::paraboloid(2).unwrap();
        let g = SpaceTimeGrid::build(d, 17, 1.0, 4).unwrap();
        assert!(!g.interior_nodes().is_empty());
        for &idx in g.active_nodes() {
            let x = g.node_coords(idx);
            let psi = level(&x);
            match g.status(idx) {
                SpatialStatus::Boundary(BoundaryTag::Gamma) => {
                    assert_eq!(x[0], 0.0);
                    assert!(psi < 0.75);
                }
                SpatialStatus::Interior | SpatialStatus::Boundary(BoundaryTag::LateralCurved) => {
                    assert!(x[0] > 0.0 && psi > 0.25 && psi < 0.75);
                }
                s => panic!("unexpected status {s:?} at {x:?}"),
            }
        }
    }

    #[test]
    fn staircase_nodes_hug_the_level_set() {
        let d = Domain::paraboloid(2).unwrap();
        let g = SpaceTimeGrid::build(d, 17, 1.0, 4).unwrap();
        let reach = 1.5 * g.max_spacing();
        let mut curved = 0;
        for &idx in g.active_nodes() {
            if g.status(idx) == SpatialStatus::Boundary(BoundaryTag::LateralCurved) {
                curved += 1;
                let x = g.node_coords(idx);
                let psi = level(&x);
                // In-domain but within one cell of either the level cap or
                // the Γ plane's outside neighbor.
                assert!(
                    0.75 - psi <= reach || x[0] <= g.spacing()[0],
                    "staircase node {x:?} far from the boundary (psi = {psi})"
                );
            }
        }
        assert!(curved > 0, "a 2-D paraboloid grid must have staircase nodes");
    }

    #[test]
    fn prism_volume_is_exact_under_trapezoid_quadrature() {
        let d = Domain::<f64>::prism(2).unwrap();
        let g = SpaceTimeGrid::build(d, 9, 1.0, 4).unwrap();
        // Ω = (0, 1/4) × (−1/2, 1/2): volume 1/4.
        assert!((g.volume() - 0.25).abs() < 1e-14);
    }

    #[test]
    fn eps_slab_shrinks_the_reach() {
        let d = Domain::<f64>::paraboloid_eps(2, 0.1).unwrap();
        assert_eq!(d.level_max().unwrap(), 0.65);
        let (lo, hi) = d.bounding_box();
        assert_eq!(lo[0], 0.0);
        assert!((hi[0] - 0.4).abs() < 1e-15);
        assert!((hi[1] - (0.8f64).sqrt()).abs() < 1e-15);
        let bad = Domain::paraboloid_eps(2, 0.5);
        assert!(bad.is_err());
    }

    #[test]
    fn f32_lane_builds_and_classifies() {
        let d = Domain::<f32>::prism(2).unwrap();
        let g = SpaceTimeGrid::build(d, 5, 1.0f32, 3).unwrap();
        assert_eq!(g.active_nodes().len(), 25);
        assert_eq!(g.classify(0, 1).unwrap(), BoundaryTag::Gamma);
    }

    proptest! {
        /// ψ grows along x₁ and with |x̄|, and every prism point is in G.
        #[test]
        fn prism_points_inside_paraboloid(
            x1 in 0.0001f64..0.2499,
            x2 in -0.49f64..0.49,
        ) {
            let prism = Domain::prism(2).unwrap();
            let parab = Domain::paraboloid(2).unwrap();
            let x = [x1, x2];
            prop_assert!(prism.contains(&x));
            prop_assert!(parab.contains(&x));
            prop_assert!(level(&x) > 0.25 && level(&x) < 0.75);
        }
    }
}
