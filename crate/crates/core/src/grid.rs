//! Cell-centered Cartesian grid over a convex domain.
//!
//! Cells whose centers lie strictly inside Ω carry unknowns. For every unknown we
//! store, per axis direction, the fraction `θ ∈ (0, 1]` of a grid step after which
//! the segment towards the neighbouring center leaves Ω (`θ = 1` when the
//! neighbour is itself interior). Exterior cells within a few steps of the
//! interior form a halo that holds extrapolated values for interpolation and
//! fold-back targets for deposition.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geometry::{ConvexDomain, Vec3};

/// Marker for "no unknown / no neighbour".
pub const NONE: u32 = u32::MAX;
/// Smallest admitted boundary leg fraction.
pub const THETA_MIN: f64 = 1e-4;
/// BFS depth of the exterior halo.
pub const HALO_DEPTH: u8 = 3;
/// Minimum number of cells across the smallest domain extent.
pub const MIN_CELLS_ACROSS: f64 = 16.0;

/// Direction index `2·axis + side`, side 0 = negative, 1 = positive.
#[inline]
pub fn dir_index(axis: usize, positive: bool) -> usize {
    2 * axis + positive as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub h: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    /// Grid with spacing `h`, symmetric about the domain center, with room for the halo.
    pub fn covering(domain: &ConvexDomain, h: f64) -> GridSpec {
        let half = domain.half_extents();
        let c = domain.center();
        let margin = HALO_DEPTH as usize + 1;
        let mut dims = [0; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            let n = (2.0 * half[a] / h - 1e-9).ceil() as usize + 2 * margin;
            dims[a] = n;
            origin[a] = c[a] - 0.5 * n as f64 * h;
        }
        GridSpec { origin, h, dims }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    #[inline]
    pub fn center(&self, idx: [usize; 3]) -> Vec3 {
        Vec3::new(
            self.origin[0] + (idx[0] as f64 + 0.5) * self.h,
            self.origin[1] + (idx[1] as f64 + 0.5) * self.h,
            self.origin[2] + (idx[2] as f64 + 0.5) * self.h,
        )
    }

    /// Neighbour of a cell in direction `d`, if inside the array.
    #[inline]
    pub fn step(&self, idx: [usize; 3], d: usize) -> Option<[usize; 3]> {
        let axis = d / 2;
        let mut out = idx;
        if d % 2 == 0 {
            if idx[axis] == 0 {
                return None;
            }
            out[axis] -= 1;
        } else {
            if idx[axis] + 1 >= self.dims[axis] {
                return None;
            }
            out[axis] += 1;
        }
        Some(out)
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Interior,
    Halo(u8),
    Exterior,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),
}

/// How a halo value is rebuilt from known values.
#[derive(Debug, Clone)]
struct HaloRule {
    cell: usize,
    /// Boundary-aware terms `(unknown, coefficient)` used for the potential at depth 1.
    dirichlet: Vec<(u32, f64)>,
    dirichlet_count: u32,
    /// Linear extrapolation pairs `(near cell, far cell or NONE)`.
    linear: Vec<(usize, usize)>,
}

/// Classified grid plus the cut-cell leg fractions of the Dirichlet operator.
#[derive(Debug)]
pub struct CellGrid {
    spec: GridSpec,
    domain: ConvexDomain,
    kind: Vec<CellKind>,
    unknown: Vec<u32>,
    cells: Vec<usize>,
    legs: Vec<[f64; 6]>,
    neighbors: Vec<[u32; 6]>,
    halo_rules: Vec<HaloRule>,
    fold: Vec<u32>,
}

impl CellGrid {
    pub fn new(domain: &ConvexDomain, h: f64) -> Result<Arc<CellGrid>, GridError> {
        if !(h.is_finite() && h > 0.0) {
            return Err(GridError::GridTooCoarse(format!("spacing must be positive, got {h}")));
        }
        let half = domain.half_extents();
        let min_extent = 2.0 * half.min();
        if min_extent / h < MIN_CELLS_ACROSS - 1e-9 {
            return Err(GridError::GridTooCoarse(format!(
                "{:.1} cells across the smallest extent, need at least {MIN_CELLS_ACROSS}",
                min_extent / h
            )));
        }
        let spec = GridSpec::covering(domain, h);
        let n = spec.len();
        let mut kind = vec![CellKind::Exterior; n];
        let mut unknown = vec![NONE; n];
        let mut cells = Vec::new();
        for idx in 0..n {
            let c = spec.center(spec.unravel(idx));
            if domain.phi(&c) < 0.0 {
                kind[idx] = CellKind::Interior;
                unknown[idx] = cells.len() as u32;
                cells.push(idx);
            }
        }
        if cells.is_empty() {
            return Err(GridError::GridTooCoarse("no interior cells".into()));
        }
        let mut legs = vec![[1.0; 6]; cells.len()];
        let mut neighbors = vec![[NONE; 6]; cells.len()];
        for (u, &idx) in cells.iter().enumerate() {
            let ijk = spec.unravel(idx);
            let c = spec.center(ijk);
            for d in 0..6 {
                let nb = spec.step(ijk, d).map(|q| spec.linear(q[0], q[1], q[2]));
                match nb {
                    Some(q) if unknown[q] != NONE => neighbors[u][d] = unknown[q],
                    _ => {
                        let mut dir = Vec3::zeros();
                        dir[d / 2] = if d % 2 == 0 { -h } else { h };
                        let theta = domain.ray_exit(&c, &dir);
                        legs[u][d] = theta.clamp(THETA_MIN, 1.0);
                    }
                }
            }
        }
        // interior connectivity
        let mut seen = vec![false; cells.len()];
        let mut queue = VecDeque::from([0u32]);
        seen[0] = true;
        let mut reached = 1;
        while let Some(u) = queue.pop_front() {
            for &nb in &neighbors[u as usize] {
                if nb != NONE && !seen[nb as usize] {
                    seen[nb as usize] = true;
                    reached += 1;
                    queue.push_back(nb);
                }
            }
        }
        if reached != cells.len() {
            return Err(GridError::GridTooCoarse(format!(
                "interior splits into disconnected pieces ({reached} of {} cells reachable)",
                cells.len()
            )));
        }

        let mut grid = CellGrid {
            spec,
            domain: domain.clone(),
            kind,
            unknown,
            cells,
            legs,
            neighbors,
            halo_rules: Vec::new(),
            fold: vec![NONE; n],
        };
        grid.build_halo();
        Ok(Arc::new(grid))
    }

    fn build_halo(&mut self) {
        let spec = self.spec;
        let n = spec.len();
        let mut depth = vec![u8::MAX; n];
        let mut parent = vec![usize::MAX; n];
        let mut frontier: Vec<usize> = self.cells.clone();
        for &c in &self.cells {
            depth[c] = 0;
        }
        let mut order = Vec::new();
        for dlev in 1..=HALO_DEPTH {
            let mut next = Vec::new();
            for &c in &frontier {
                let ijk = spec.unravel(c);
                for d in 0..6 {
                    if let Some(q) = spec.step(ijk, d) {
                        let qi = spec.linear(q[0], q[1], q[2]);
                        if depth[qi] == u8::MAX {
                            depth[qi] = dlev;
                            parent[qi] = c;
                            self.kind[qi] = CellKind::Halo(dlev);
                            next.push(qi);
                        }
                    }
                }
            }
            next.sort_unstable();
            order.extend(next.iter().copied());
            frontier = next;
        }

        for &c in &order {
            let dlev = depth[c];
            let ijk = spec.unravel(c);
            let mut rule = HaloRule { cell: c, dirichlet: Vec::new(), dirichlet_count: 0, linear: Vec::new() };
            for d in 0..6 {
                let Some(q) = spec.step(ijk, d) else { continue };
                let qi = spec.linear(q[0], q[1], q[2]);
                if depth[qi] >= dlev {
                    continue;
                }
                let far = spec
                    .step(q, d)
                    .map(|r| spec.linear(r[0], r[1], r[2]))
                    .filter(|&r| depth[r] < dlev)
                    .unwrap_or(usize::MAX);
                rule.linear.push((qi, far));
                if dlev == 1 {
                    // neighbour qi is interior; its leg towards this cell points opposite to d
                    let u = self.unknown[qi];
                    let back = d ^ 1;
                    let theta = self.legs[u as usize][back];
                    let inner = self.neighbors[u as usize][d];
                    if inner != NONE {
                        rule.dirichlet.push((u, -2.0 * (1.0 - theta) / theta));
                        rule.dirichlet.push((inner, (1.0 - theta) / (1.0 + theta)));
                    } else {
                        rule.dirichlet.push((u, 1.0 - 1.0 / theta));
                    }
                    rule.dirichlet_count += 1;
                }
            }
            self.halo_rules.push(rule);

            // fold-back target: mirror the center across the wall, then walk inward
            let center = spec.center(ijk);
            let mut target = NONE;
            if let Ok(b) = self.domain.closest_boundary_point(&center) {
                let n = self.domain.gradient(&b).normalize();
                let mut y = 2.0 * b - center;
                for _ in 0..8 {
                    if let Some(cell) = self.cell_of(&y) {
                        if self.unknown[cell] != NONE {
                            target = self.unknown[cell];
                            break;
                        }
                    }
                    y -= 0.5 * spec.h * n;
                }
            }
            if target == NONE {
                let mut p = parent[c];
                while self.unknown[p] == NONE {
                    p = parent[p];
                }
                target = self.unknown[p];
            }
            self.fold[c] = target;
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn domain(&self) -> &ConvexDomain {
        &self.domain
    }

    pub fn h(&self) -> f64 {
        self.spec.h
    }

    pub fn n_unknowns(&self) -> usize {
        self.cells.len()
    }

    pub fn kind(&self, cell: usize) -> CellKind {
        self.kind[cell]
    }

    pub fn unknown_of(&self, cell: usize) -> Option<usize> {
        let u = self.unknown[cell];
        (u != NONE).then_some(u as usize)
    }

    pub fn cell_of_unknown(&self, u: usize) -> usize {
        self.cells[u]
    }

    pub fn center_of_unknown(&self, u: usize) -> Vec3 {
        self.spec.center(self.spec.unravel(self.cells[u]))
    }

    pub fn legs(&self, u: usize) -> &[f64; 6] {
        &self.legs[u]
    }

    pub fn neighbors(&self, u: usize) -> &[u32; 6] {
        &self.neighbors[u]
    }

    /// Unknown receiving deposits that land on a halo cell.
    pub fn fold_target(&self, cell: usize) -> Option<usize> {
        let t = self.fold[cell];
        (t != NONE).then_some(t as usize)
    }

    /// Cell whose box contains `x`.
    pub fn cell_of(&self, x: &Vec3) -> Option<usize> {
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let f = ((x[a] - self.spec.origin[a]) / self.spec.h).floor();
            if f < 0.0 || f >= self.spec.dims[a] as f64 {
                return None;
            }
            ijk[a] = f as usize;
        }
        Some(self.spec.linear(ijk[0], ijk[1], ijk[2]))
    }

    /// Trilinear stencil over cell centers: the 8 corner cells and weights.
    #[inline]
    pub fn trilinear(&self, x: &Vec3) -> Option<([usize; 8], [f64; 8])> {
        let s = &self.spec;
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let f = (x[a] - s.origin[a]) / s.h - 0.5;
            let fl = f.floor();
            if fl < 0.0 || fl + 1.0 >= s.dims[a] as f64 {
                return None;
            }
            base[a] = fl as usize;
            t[a] = f - fl;
        }
        let mut cells = [0usize; 8];
        let mut w = [0.0; 8];
        for corner in 0..8 {
            let (di, dj, dk) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            cells[corner] = s.linear(base[0] + di, base[1] + dj, base[2] + dk);
            let wx = if di == 1 { t[0] } else { 1.0 - t[0] };
            let wy = if dj == 1 { t[1] } else { 1.0 - t[1] };
            let wz = if dk == 1 { t[2] } else { 1.0 - t[2] };
            w[corner] = wx * wy * wz;
        }
        Some((cells, w))
    }

    /// Extend per-unknown values to a full-grid array. Halo values come from
    /// extrapolation along grid lines; with `dirichlet` the first halo layer
    /// uses the zero wall value at the cut point.
    pub fn extend(&self, values: &[f64], dirichlet: bool) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.len()];
        for (u, &c) in self.cells.iter().enumerate() {
            out[c] = values[u];
        }
        for rule in &self.halo_rules {
            let v = if dirichlet && rule.dirichlet_count > 0 {
                rule.dirichlet.iter().map(|&(u, w)| w * values[u as usize]).sum::<f64>()
                    / rule.dirichlet_count as f64
            } else if !rule.linear.is_empty() {
                rule.linear
                    .iter()
                    .map(|&(near, far)| if far == usize::MAX { out[near] } else { 2.0 * out[near] - out[far] })
                    .sum::<f64>()
                    / rule.linear.len() as f64
            } else {
                0.0
            };
            out[rule.cell] = v;
        }
        out
    }

    /// True if the cell holds a value in extended arrays.
    #[inline]
    pub fn has_value(&self, cell: usize) -> bool {
        !matches!(self.kind[cell], CellKind::Exterior)
    }

    /// `M u` where `M = −h² Δ_h` is the symmetric positive definite cut-cell operator.
    pub fn apply_operator(&self, u: &[f64], out: &mut [f64]) {
        use rayon::prelude::*;
        const CHUNK: usize = 4096;
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, chunk)| {
            let start = ci * CHUNK;
            for (off, o) in chunk.iter_mut().enumerate() {
                let i = start + off;
                let nb = &self.neighbors[i];
                let legs = &self.legs[i];
                let mut acc = 0.0;
                for d in 0..6 {
                    if nb[d] != NONE {
                        acc += u[i] - u[nb[d] as usize];
                    } else {
                        acc += u[i] / legs[d];
                    }
                }
                *o = acc;
            }
        });
    }

    /// Diagonal of `M`.
    pub fn operator_diagonal(&self, u: usize) -> f64 {
        (0..6).map(|d| if self.neighbors[u][d] != NONE { 1.0 } else { 1.0 / self.legs[u][d] }).sum()
    }

    /// Discrete Laplacian `Δ_h u` (Dirichlet zero at cut points).
    pub fn laplacian(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        self.apply_operator(u, &mut out);
        let s = -1.0 / (self.spec.h * self.spec.h);
        out.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Second-order one-sided/central gradient at every unknown, using the
    /// zero wall value at cut points.
    pub fn gradient(&self, u: &[f64]) -> Vec<[f64; 3]> {
        let h = self.spec.h;
        (0..self.cells.len())
            .map(|i| {
                let mut g = [0.0; 3];
                for (axis, ga) in g.iter_mut().enumerate() {
                    let (dm, dp) = (2 * axis, 2 * axis + 1);
                    let a = self.legs[i][dm] * h;
                    let b = self.legs[i][dp] * h;
                    let fm = if self.neighbors[i][dm] != NONE { u[self.neighbors[i][dm] as usize] } else { 0.0 };
                    let fp = if self.neighbors[i][dp] != NONE { u[self.neighbors[i][dp] as usize] } else { 0.0 };
                    *ga = -b / (a * (a + b)) * fm + (b - a) / (a * b) * u[i] + a / (b * (a + b)) * fp;
                }
                g
            })
            .collect()
    }
}

/// Neumaier-compensated sum in a fixed order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in it {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn too_coarse_is_rejected() {
        let d = ConvexDomain::ball(1.0).unwrap();
        assert!(matches!(CellGrid::new(&d, 0.25), Err(GridError::GridTooCoarse(_))));
        assert!(CellGrid::new(&d, 1.0 / 8.0).is_ok());
    }

    #[test]
    fn grid_is_symmetric_about_center() {
        let d = ConvexDomain::ball(1.0).unwrap();
        let g = CellGrid::new(&d, 1.0 / 8.0).unwrap();
        let s = g.spec();
        for a in 0..3 {
            let lo = s.origin[a];
            let hi = s.origin[a] + s.dims[a] as f64 * s.h;
            assert!((lo + hi).abs() < 1e-12);
        }
    }

    #[test]
    fn legs_locate_the_wall() {
        let d = ConvexDomain::ball(1.0).unwrap();
        let g = CellGrid::new(&d, 1.0 / 16.0).unwrap();
        for u in 0..g.n_unknowns() {
            let c = g.center_of_unknown(u);
            for dir in 0..6 {
                if g.neighbors(u)[dir] == NONE {
                    let mut p = c;
                    p[dir / 2] += if dir % 2 == 0 { -1.0 } else { 1.0 } * g.legs(u)[dir] * g.h();
                    if g.legs(u)[dir] > THETA_MIN {
                        assert!(d.phi(&p).abs() < 1e-12, "leg end off the wall: {}", d.phi(&p));
                    }
                }
            }
        }
    }

    #[test]
    fn operator_is_symmetric() {
        // discrete Green identity  Σ ψ Δφ = Σ φ Δψ
        let d = ConvexDomain::ellipsoid([1.0, 0.8, 0.6]).unwrap();
        let g = CellGrid::new(&d, 1.0 / 20.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = g.n_unknowns();
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let la = g.laplacian(&a);
        let lb = g.laplacian(&b);
        let s1 = compensated_sum(b.iter().zip(&la).map(|(x, y)| x * y));
        let s2 = compensated_sum(a.iter().zip(&lb).map(|(x, y)| x * y));
        let scale = compensated_sum(b.iter().zip(&la).map(|(x, y)| (x * y).abs()));
        assert!((s1 - s2).abs() <= 1e-9 * scale, "{s1} vs {s2}");
    }

    #[test]
    fn gradient_exact_for_quadratics() {
        let d = ConvexDomain::ball(1.0).unwrap();
        let g = CellGrid::new(&d, 1.0 / 16.0).unwrap();
        // φ = (r² − 1)/6 vanishes on the wall, so the cut stencils are exact too
        let u: Vec<f64> = (0..g.n_unknowns())
            .map(|i| (g.center_of_unknown(i).norm_squared() - 1.0) / 6.0)
            .collect();
        let grad = g.gradient(&u);
        for (i, gr) in grad.iter().enumerate() {
            let c = g.center_of_unknown(i);
            for a in 0..3 {
                assert!((gr[a] - c[a] / 3.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }
}
