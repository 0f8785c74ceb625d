//! Electrostatic potential with homogeneous Dirichlet data: `Δφ = ρ` in Ω,
//! `φ = 0` on ∂Ω, field `E = ∇φ`, its boundary decomposition and the
//! near-wall diagnostics (Hopf margin, decay scans).

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{fibonacci_directions, BoundaryFrame, ConvexDomain, GeometryError, LocalPhase, Vec3};
use crate::grid::{compensated_sum, CellGrid, GridError, GridSpec};
use crate::solver::{pcg, IncompleteCholesky};

pub const DEFAULT_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("Poisson solver stalled after {iterations} iterations at relative residual {residual:.3e}")]
    SolverDivergence { iterations: usize, residual: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("point {0:?} is outside the domain")]
    OutsideDomain([f64; 3]),
    #[error("maximum principle violated: max phi = {0:.3e} with non-negative density")]
    MaximumPrinciple(f64),
    #[error("negative density {0:.3e} in an interior cell")]
    NegativeDensity(f64),
    #[error("Hopf margin is not positive (inf of -phi/x_perp = {0:.3e})")]
    NonpositiveMargin(f64),
    #[error("scan distance {d:.3e} exceeds the tubular width {width:.3e}")]
    LadderExitsGrid { d: f64, width: f64 },
    #[error("density source violates continuity: residual {0:.3e}")]
    ContinuityViolated(f64),
}

/// Anything that provides a potential and its gradient.
pub trait ForceField: Sync {
    fn potential(&self, x: &Vec3) -> Result<f64, FieldError>;
    fn field(&self, x: &Vec3) -> Result<Vec3, FieldError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl ForceField for ZeroField {
    fn potential(&self, _x: &Vec3) -> Result<f64, FieldError> {
        Ok(0.0)
    }
    fn field(&self, _x: &Vec3) -> Result<Vec3, FieldError> {
        Ok(Vec3::zeros())
    }
}

/// Exact solution for a uniform density in a ball: `φ = ρ(|x−c|² − R²)/6`.
#[derive(Debug, Clone, Copy)]
pub struct UniformBallField {
    pub density: f64,
    pub radius: f64,
    pub center: Vec3,
}

impl ForceField for UniformBallField {
    fn potential(&self, x: &Vec3) -> Result<f64, FieldError> {
        Ok(self.density * ((x - self.center).norm_squared() - self.radius * self.radius) / 6.0)
    }
    fn field(&self, x: &Vec3) -> Result<Vec3, FieldError> {
        Ok(self.density * (x - self.center) / 3.0)
    }
}

/// Cell-centered charge density on the interior cells of a grid.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    grid: Arc<CellGrid>,
    values: Vec<f64>,
    pub time: f64,
}

impl DensityGrid {
    pub fn zeros(grid: &Arc<CellGrid>) -> Self {
        DensityGrid { grid: grid.clone(), values: vec![0.0; grid.n_unknowns()], time: 0.0 }
    }

    pub fn from_values(grid: &Arc<CellGrid>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.n_unknowns());
        DensityGrid { grid: grid.clone(), values, time: 0.0 }
    }

    /// Point samples of `f` at interior cell centers.
    pub fn from_fn(grid: &Arc<CellGrid>, f: impl Fn(&Vec3) -> f64) -> Self {
        let values = (0..grid.n_unknowns()).map(|u| f(&grid.center_of_unknown(u))).collect();
        DensityGrid { grid: grid.clone(), values, time: 0.0 }
    }

    pub fn grid(&self) -> &Arc<CellGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `Σ ρ·h³`.
    pub fn total_mass(&self) -> f64 {
        compensated_sum(self.values.iter().copied()) * self.grid.spec().cell_volume()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// `‖ρ‖_{L^p}` with cell-volume quadrature.
    pub fn lp_norm(&self, p: f64) -> f64 {
        let s = compensated_sum(self.values.iter().map(|v| v.abs().powf(p)));
        (s * self.grid.spec().cell_volume()).powf(1.0 / p)
    }

    /// Full-grid array (exterior cells zero), x-fastest.
    pub fn to_full(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.spec().len()];
        for (u, v) in self.values.iter().enumerate() {
            out[self.grid.cell_of_unknown(u)] = *v;
        }
        out
    }
}

/// Solved potential on a grid, with cached gradients and halo extensions.
#[derive(Debug, Clone)]
pub struct PotentialField {
    grid: Arc<CellGrid>,
    phi: Vec<f64>,
    phi_ext: Vec<f64>,
    grad_ext: [Vec<f64>; 3],
    pub residual: f64,
    pub iterations: usize,
    pub time: f64,
}

/// Decomposition of `E` in a boundary frame, with the tangential and normal
/// accelerations of the boundary-adapted characteristic system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFieldSample {
    /// `(E₁, E₂)` along the principal directions.
    pub e_tangent: [f64; 2],
    /// `E⊥ = −E·n`.
    pub e_perp: f64,
    pub sigma: [f64; 2],
    /// `F = E⊥ + Σ wⱼ² bⱼ / (1 − kⱼ x⊥)`.
    pub normal_force: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub e: Vec3,
    pub local: Option<LocalFieldSample>,
}

/// Decompose `E = E₁u₁ + E₂u₂ − E⊥n` and evaluate `σᵢ`, `F` for the phase point `lp`.
pub fn decompose(e: &Vec3, frame: &BoundaryFrame, lp: &LocalPhase) -> Result<LocalFieldSample, GeometryError> {
    let m = frame.check_metric(lp.x_perp)?;
    let e_tangent = [e.dot(&frame.u[0]), e.dot(&frame.u[1])];
    let e_perp = -e.dot(&frame.normal);
    let mut sigma = [0.0; 2];
    for (i, s) in sigma.iter_mut().enumerate() {
        let mut acc = e_tangent[i] + lp.v_perp * lp.w[i] * frame.k[i] / m[i];
        for j in 0..2 {
            for l in 0..2 {
                acc -= frame.christoffel[i][j][l] * lp.w[j] * lp.w[l] / m[j];
            }
        }
        *s = acc;
    }
    let normal_force = e_perp + (0..2).map(|j| lp.w[j] * lp.w[j] * frame.b[j] / m[j]).sum::<f64>();
    Ok(LocalFieldSample { e_tangent, e_perp, sigma, normal_force })
}

/// Maximum number of PCG iterations for a grid: twenty per cell across the largest dimension.
pub fn iteration_cap(grid: &CellGrid) -> usize {
    20 * grid.spec().dims.iter().copied().max().unwrap_or(1).max(1)
}

/// Solve `Δφ = ρ`, `φ = 0` on ∂Ω. `warm` is an optional initial guess.
pub fn solve_poisson(rho: &DensityGrid, tol: f64, warm: Option<&[f64]>) -> Result<PotentialField, FieldError> {
    let grid = rho.grid().clone();
    let n = grid.n_unknowns();
    let mut min_rho: f64 = 0.0;
    for v in rho.values() {
        min_rho = min_rho.min(*v);
    }
    let h2 = grid.h() * grid.h();
    let b: Vec<f64> = rho.values().iter().map(|r| -h2 * r).collect();
    let mut x = match warm {
        Some(w) if w.len() == n => w.to_vec(),
        _ => vec![0.0; n],
    };
    let precond = IncompleteCholesky::new(&grid);
    let stats = pcg(&grid, &precond, &b, &mut x, tol, iteration_cap(&grid))
        .map_err(|s| FieldError::SolverDivergence { iterations: s.iterations, residual: s.residual })?;
    if min_rho >= 0.0 {
        let max_phi = x.iter().cloned().fold(f64::MIN, f64::max);
        let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if max_phi > 100.0 * tol * scale + 1e-300 {
            return Err(FieldError::MaximumPrinciple(max_phi));
        }
    }
    let mut field = PotentialField::from_values(&grid, x);
    field.residual = stats.residual;
    field.iterations = stats.iterations;
    field.time = rho.time;
    Ok(field)
}

impl PotentialField {
    /// Wrap per-unknown potential values (gradients and halo are rebuilt).
    pub fn from_values(grid: &Arc<CellGrid>, phi: Vec<f64>) -> Self {
        let phi_ext = grid.extend(&phi, true);
        let grad = grid.gradient(&phi);
        let grad_ext = [0, 1, 2].map(|a| {
            let comp: Vec<f64> = grad.iter().map(|g| g[a]).collect();
            grid.extend(&comp, false)
        });
        PotentialField { grid: grid.clone(), phi, phi_ext, grad_ext, residual: 0.0, iterations: 0, time: 0.0 }
    }

    pub fn zeros(grid: &Arc<CellGrid>) -> Self {
        Self::from_values(grid, vec![0.0; grid.n_unknowns()])
    }

    pub fn grid(&self) -> &Arc<CellGrid> {
        &self.grid
    }

    pub fn domain(&self) -> &ConvexDomain {
        self.grid.domain()
    }

    /// Potential at interior cell centers.
    pub fn values(&self) -> &[f64] {
        &self.phi
    }

    pub fn into_values(self) -> Vec<f64> {
        self.phi
    }

    /// Gradient at an interior cell.
    pub fn cell_gradient(&self, u: usize) -> Vec3 {
        let c = self.grid.cell_of_unknown(u);
        Vec3::new(self.grad_ext[0][c], self.grad_ext[1][c], self.grad_ext[2][c])
    }

    /// Largest `|E|` over every grid value used by interpolation.
    pub fn max_field_magnitude(&self) -> f64 {
        (0..self.grid.spec().len())
            .filter(|&c| self.grid.has_value(c))
            .map(|c| (self.grad_ext[0][c].powi(2) + self.grad_ext[1][c].powi(2) + self.grad_ext[2][c].powi(2)).sqrt())
            .fold(0.0, f64::max)
    }

    /// `∫|E|²` in the discrete energy form `−Σ φρ h³`.
    pub fn field_energy(&self, rho: &DensityGrid) -> f64 {
        -compensated_sum(self.phi.iter().zip(rho.values()).map(|(p, r)| p * r)) * self.grid.spec().cell_volume()
    }

    /// Grid L² norm of `E` over interior cells.
    pub fn field_l2(&self) -> f64 {
        let s = compensated_sum((0..self.phi.len()).map(|u| self.cell_gradient(u).norm_squared()));
        (s * self.grid.spec().cell_volume()).sqrt()
    }

    /// Grid L² norm of `E − E_other`.
    pub fn field_l2_difference(&self, other: &PotentialField) -> f64 {
        let s = compensated_sum((0..self.phi.len()).map(|u| (self.cell_gradient(u) - other.cell_gradient(u)).norm_squared()));
        (s * self.grid.spec().cell_volume()).sqrt()
    }

    #[inline]
    fn interpolate(&self, x: &Vec3, data: &[&[f64]]) -> Result<[f64; 3], FieldError> {
        let (cells, w) = self.grid.trilinear(x).ok_or(FieldError::OutsideDomain([x.x, x.y, x.z]))?;
        let mut out = [0.0; 3];
        for c in 0..8 {
            if w[c] == 0.0 {
                continue;
            }
            if !self.grid.has_value(cells[c]) {
                return Err(FieldError::OutsideDomain([x.x, x.y, x.z]));
            }
            for (o, d) in out.iter_mut().zip(data) {
                *o += w[c] * d[cells[c]];
            }
        }
        Ok(out)
    }

    /// `E` at a point of the closure of Ω, by trilinear interpolation of cell gradients.
    pub fn eval_field(&self, x: &Vec3) -> Result<FieldSample, FieldError> {
        Ok(FieldSample { e: self.field(x)?, local: None })
    }

    /// `E` with its boundary decomposition for the phase point `(x, v)`.
    pub fn eval_field_local(&self, x: &Vec3, v: &Vec3) -> Result<(FieldSample, LocalPhase, BoundaryFrame), FieldError> {
        let e = self.field(x)?;
        let (lp, frame) = self.domain().to_local(x, v)?;
        let local = decompose(&e, &frame, &lp)?;
        Ok((FieldSample { e, local: Some(local) }, lp, frame))
    }

    /// Full-grid potential (exterior cells zero), x-fastest.
    pub fn to_full(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.spec().len()];
        for (u, v) in self.phi.iter().enumerate() {
            out[self.grid.cell_of_unknown(u)] = *v;
        }
        out
    }
}

impl ForceField for PotentialField {
    fn potential(&self, x: &Vec3) -> Result<f64, FieldError> {
        if !self.domain().contains_closure(x) {
            return Err(FieldError::OutsideDomain([x.x, x.y, x.z]));
        }
        Ok(self.interpolate(x, &[&self.phi_ext])?[0])
    }

    fn field(&self, x: &Vec3) -> Result<Vec3, FieldError> {
        if !self.domain().contains_closure(x) {
            return Err(FieldError::OutsideDomain([x.x, x.y, x.z]));
        }
        let g = self.interpolate(x, &[&self.grad_ext[0], &self.grad_ext[1], &self.grad_ext[2]])?;
        Ok(Vec3::new(g[0], g[1], g[2]))
    }
}

/// Result of a Hopf margin scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HopfEstimate {
    /// `inf(−φ/x⊥)` over the sampled band.
    pub eps0: f64,
    pub band: f64,
    pub worst_point: [f64; 3],
}

/// Estimate `ε₀` in `φ ≤ −ε₀ x⊥` over points with `0 < x⊥ ≤ band`.
pub fn hopf_margin(
    field: &dyn ForceField,
    domain: &ConvexDomain,
    band: f64,
    directions: usize,
    depths: usize,
) -> Result<HopfEstimate, FieldError> {
    if band > domain.tube_width() {
        return Err(FieldError::LadderExitsGrid { d: band, width: domain.tube_width() });
    }
    let mut best = HopfEstimate { eps0: f64::INFINITY, band, worst_point: [0.0; 3] };
    for dir in fibonacci_directions(directions) {
        let p = domain.boundary_point_along(&dir);
        let n = domain.gradient(&p).normalize();
        for j in 1..=depths {
            let s = band * j as f64 / depths as f64;
            let x = p - s * n;
            let ratio = -field.potential(&x)? / s;
            if ratio < best.eps0 {
                best.eps0 = ratio;
                best.worst_point = [x.x, x.y, x.z];
            }
        }
    }
    if !(best.eps0 > 0.0) {
        return Err(FieldError::NonpositiveMargin(best.eps0));
    }
    Ok(best)
}

/// Time-dependent density with its current `j`, `∂ₜρ + ∇·j = 0`.
pub trait DensitySource: Sync {
    fn density(&self, t: f64, x: &Vec3) -> f64;
    fn current(&self, t: f64, x: &Vec3) -> Vec3;
    fn is_static(&self) -> bool {
        false
    }
}

/// Static density given by a closure.
pub struct StaticDensity<F: Fn(&Vec3) -> f64 + Sync>(pub F);

impl<F: Fn(&Vec3) -> f64 + Sync> DensitySource for StaticDensity<F> {
    fn density(&self, _t: f64, x: &Vec3) -> f64 {
        (self.0)(x)
    }
    fn current(&self, _t: f64, _x: &Vec3) -> Vec3 {
        Vec3::zeros()
    }
    fn is_static(&self) -> bool {
        true
    }
}

/// Uniform background plus a smooth blob translating with constant velocity;
/// the current is `j = ρ_blob·u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovingBlob {
    pub background: f64,
    pub amplitude: f64,
    pub radius: f64,
    pub center: [f64; 3],
    pub velocity: [f64; 3],
}

impl MovingBlob {
    fn blob(&self, t: f64, x: &Vec3) -> f64 {
        let c = Vec3::from(self.center) + t * Vec3::from(self.velocity);
        let s = (x - c).norm_squared() / (self.radius * self.radius);
        if s >= 1.0 {
            0.0
        } else {
            self.amplitude * (1.0 - s).powi(3)
        }
    }
}

impl DensitySource for MovingBlob {
    fn density(&self, t: f64, x: &Vec3) -> f64 {
        self.background + self.blob(t, x)
    }
    fn current(&self, t: f64, x: &Vec3) -> Vec3 {
        self.blob(t, x) * Vec3::from(self.velocity)
    }
}

/// Largest `|∂ₜρ + ∇·j|` over sample points, by central differences,
/// relative to the largest `|∂ₜρ|`.
pub fn continuity_residual(source: &dyn DensitySource, domain: &ConvexDomain, t: f64) -> f64 {
    let eps_t = 1e-6;
    let eps_x = 1e-6 * domain.diameter();
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for dir in fibonacci_directions(200) {
        for frac in [0.1, 0.4, 0.7, 0.95] {
            let x = domain.center() + frac * (domain.boundary_point_along(&dir) - domain.center());
            let drho = (source.density(t + eps_t, &x) - source.density(t - eps_t, &x)) / (2.0 * eps_t);
            let mut div = 0.0;
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = eps_x;
                div += (source.current(t, &(x + e))[a] - source.current(t, &(x - e))[a]) / (2.0 * eps_x);
            }
            worst = worst.max((drho + div).abs());
            scale = scale.max(drho.abs()).max(div.abs());
        }
    }
    if scale == 0.0 {
        0.0
    } else {
        worst / scale
    }
}

/// `C·d(1 + |log d|)` envelope: `c` is the smallest constant keeping every
/// sample under the curve, `r_squared` the coefficient of determination of
/// that curve against the samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeFit {
    pub c: f64,
    pub r_squared: f64,
}

pub fn log_envelope(d: f64) -> f64 {
    d * (1.0 + d.ln().abs())
}

pub fn fit_envelope(d: &[f64], y: &[f64]) -> EnvelopeFit {
    let g: Vec<f64> = d.iter().map(|&d| log_envelope(d)).collect();
    let c = y.iter().zip(&g).map(|(y, g)| y.abs() / g).fold(0.0, f64::max);
    let mean = y.iter().map(|v| v.abs()).sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v.abs() - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(&g).map(|(v, g)| (v.abs() - c * g).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    EnvelopeFit { c, r_squared }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecayScanSpec {
    /// Direction from the domain center to the boundary point of the scan.
    pub direction: [f64; 3],
    /// Largest distance of the ladder; `d_m = d0·2^{−m}`.
    pub d0: f64,
    pub levels: usize,
    pub time: f64,
    /// Half-width of the centered time difference.
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayRow {
    pub d: f64,
    pub dphi_du1: f64,
    pub dphi_du2: f64,
    pub dphi_dt: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayScan {
    pub rows: Vec<DecayRow>,
    pub tangential_fit: EnvelopeFit,
    pub time_fit: EnvelopeFit,
    pub continuity_residual: f64,
}

fn solve_source(grid: &Arc<CellGrid>, source: &dyn DensitySource, t: f64, tol: f64, warm: Option<&[f64]>) -> Result<PotentialField, FieldError> {
    let mut rho = DensityGrid::from_fn(grid, |x| source.density(t, x));
    rho.time = t;
    solve_poisson(&rho, tol, warm)
}

/// Tangential and time derivatives of `φ` along the inward normal from a
/// boundary point, on a geometric ladder of wall distances.
pub fn boundary_decay_scan(
    source: &dyn DensitySource,
    grid: &Arc<CellGrid>,
    tol: f64,
    spec: &DecayScanSpec,
) -> Result<DecayScan, FieldError> {
    let domain = grid.domain();
    if spec.d0 >= domain.tube_width() {
        return Err(FieldError::LadderExitsGrid { d: spec.d0, width: domain.tube_width() });
    }
    let continuity = continuity_residual(source, domain, spec.time);
    if continuity > 1e-4 {
        return Err(FieldError::ContinuityViolated(continuity));
    }
    let p = domain.boundary_point_along(&Vec3::from(spec.direction));
    let frame = domain.frame_curvatures(&p)?;
    let now = solve_source(grid, source, spec.time, tol, None)?;
    let (before, after) = if source.is_static() {
        (None, None)
    } else {
        let b = solve_source(grid, source, spec.time - spec.dt, tol, Some(now.values()))?;
        let a = solve_source(grid, source, spec.time + spec.dt, tol, Some(now.values()))?;
        (Some(b), Some(a))
    };
    let mut rows = Vec::with_capacity(spec.levels);
    for m in 0..spec.levels {
        let d = spec.d0 * 0.5f64.powi(m as i32);
        let x = p - d * frame.normal;
        let e = now.field(&x)?;
        let dphi_dt = match (&before, &after) {
            (Some(b), Some(a)) => (a.potential(&x)? - b.potential(&x)?) / (2.0 * spec.dt),
            _ => 0.0,
        };
        rows.push(DecayRow { d, dphi_du1: e.dot(&frame.u[0]), dphi_du2: e.dot(&frame.u[1]), dphi_dt });
    }
    let d: Vec<f64> = rows.iter().map(|r| r.d).collect();
    let tang: Vec<f64> = rows.iter().map(|r| r.dphi_du1.hypot(r.dphi_du2)).collect();
    let time: Vec<f64> = rows.iter().map(|r| r.dphi_dt).collect();
    Ok(DecayScan {
        tangential_fit: fit_envelope(&d, &tang),
        time_fit: fit_envelope(&d, &time),
        rows,
        continuity_residual: continuity,
    })
}

/// JSON sidecar of a binary grid dump.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DumpHeader {
    pub quantity: String,
    pub dims: [usize; 3],
    pub h: f64,
    pub origin: [f64; 3],
    pub time: f64,
    pub dtype: String,
    pub order: String,
}

/// Write `values` (full grid, x-fastest) as little-endian f64 to `<stem>.bin`
/// with a `<stem>.json` sidecar.
pub fn write_dump(dir: &Path, stem: &str, quantity: &str, spec: &GridSpec, time: f64, values: &[f64]) -> std::io::Result<()> {
    assert_eq!(values.len(), spec.len());
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(dir.join(format!("{stem}.bin")))?.write_all(&bytes)?;
    let header = DumpHeader {
        quantity: quantity.to_string(),
        dims: spec.dims,
        h: spec.h,
        origin: spec.origin,
        time,
        dtype: "f64-le".into(),
        order: "x-fastest".into(),
    };
    let mut f = fs::File::create(dir.join(format!("{stem}.json")))?;
    serde_json::to_writer_pretty(&mut f, &header).map_err(std::io::Error::other)?;
    f.write_all(b"\n")
}

/// Read a dump written by [`write_dump`].
pub fn read_dump(dir: &Path, stem: &str) -> std::io::Result<(DumpHeader, Vec<f64>)> {
    let header: DumpHeader = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)
        .map_err(std::io::Error::other)?;
    let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ball_grid(h: f64) -> Arc<CellGrid> {
        CellGrid::new(&ConvexDomain::ball(1.0).unwrap(), h).unwrap()
    }

    #[test]
    fn zero_density_gives_zero_potential() {
        let g = ball_grid(1.0 / 16.0);
        let phi = solve_poisson(&DensityGrid::zeros(&g), DEFAULT_TOL, None).unwrap();
        assert!(phi.values().iter().all(|v| *v == 0.0));
        let e = phi.field(&Vec3::new(0.3, 0.2, -0.1)).unwrap();
        assert_eq!(e, Vec3::zeros());
        assert!(matches!(hopf_margin(&phi, g.domain(), 0.1, 32, 4), Err(FieldError::NonpositiveMargin(_))));
    }

    #[test]
    fn uniform_density_matches_radial_solution() {
        let g = ball_grid(1.0 / 16.0);
        let rho = DensityGrid::from_fn(&g, |_| 1.0);
        let phi = solve_poisson(&rho, DEFAULT_TOL, None).unwrap();
        let err = (0..g.n_unknowns())
            .map(|u| (phi.values()[u] - (g.center_of_unknown(u).norm_squared() - 1.0) / 6.0).abs())
            .fold(0.0, f64::max);
        assert!(err < 5e-3, "error {err}");
        assert!(phi.values().iter().all(|v| *v <= 0.0));
        let e = phi.field(&Vec3::new(0.6, 0.0, 0.0)).unwrap();
        assert!((e - Vec3::new(0.2, 0.0, 0.0)).norm() < 5e-3, "{e:?}");
        let (sample, _, _) = phi.eval_field_local(&Vec3::new(0.6, 0.0, 0.0), &Vec3::zeros()).unwrap();
        assert!((sample.local.unwrap().e_perp + 0.2).abs() < 5e-3);
    }

    #[test]
    fn negative_density_is_a_plain_solve() {
        let g = ball_grid(1.0 / 16.0);
        let rho = DensityGrid::from_fn(&g, |x| x.x);
        assert!(solve_poisson(&rho, DEFAULT_TOL, None).is_ok());
    }

    #[test]
    fn iteration_budget_exhaustion_reported() {
        let g = ball_grid(1.0 / 16.0);
        let rho = DensityGrid::from_fn(&g, |_| 1.0);
        let precond = IncompleteCholesky::new(&g);
        let b: Vec<f64> = rho.values().iter().map(|r| -r).collect();
        let mut x = vec![0.0; g.n_unknowns()];
        assert!(pcg(&g, &precond, &b, &mut x, 1e-14, 2).is_err());
    }

    #[test]
    fn decomposition_reproduces_field() {
        let d = ConvexDomain::ellipsoid([2.0, 1.0, 1.5]).unwrap();
        let x = Vec3::new(0.3, 0.85, 0.2);
        let (lp, frame) = d.to_local(&x, &Vec3::new(0.4, -0.2, 0.7)).unwrap();
        let e = Vec3::new(0.3, -1.2, 0.5);
        let s = decompose(&e, &frame, &lp).unwrap();
        let back = s.e_tangent[0] * frame.u[0] + s.e_tangent[1] * frame.u[1] - s.e_perp * frame.normal;
        assert_relative_eq!(back, e, max_relative = 1e-12);
    }

    #[test]
    fn normal_force_negative_in_uniform_ball() {
        let d = ConvexDomain::ball(1.0).unwrap();
        let f = UniformBallField { density: 1.0, radius: 1.0, center: Vec3::zeros() };
        for (i, p) in d.boundary_samples(40).iter().enumerate() {
            for s in [0.0, 0.05, 0.2, 0.45] {
                let x = p * (1.0 - s);
                let wdir = crate::geometry::tangent_basis(&p.normalize()).0;
                let v = (i as f64 / 40.0) * wdir;
                let e = f.field(&x).unwrap();
                let (lp, frame) = d.to_local(&x, &v).unwrap();
                let local = decompose(&e, &frame, &lp).unwrap();
                assert!(local.normal_force < 0.0);
            }
        }
    }

    #[test]
    fn envelope_fit_is_tight() {
        let d = [0.2, 0.1, 0.05];
        let y: Vec<f64> = d.iter().map(|d| 0.3 * log_envelope(*d)).collect();
        let fit = fit_envelope(&d, &y);
        assert_relative_eq!(fit.c, 0.3, max_relative = 1e-12);
        assert_relative_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
        let zero = fit_envelope(&d, &[0.0, 0.0, 0.0]);
        assert_eq!(zero.c, 0.0);
    }

    #[test]
    fn moving_blob_obeys_continuity() {
        let d = ConvexDomain::ball(1.0).unwrap();
        let blob = MovingBlob { background: 1.0, amplitude: 2.0, radius: 0.4, center: [0.1, 0.0, 0.0], velocity: [0.0, 0.5, 0.2] };
        assert!(continuity_residual(&blob, &d, 0.0) < 1e-5);
    }

    #[test]
    fn dump_round_trip() {
        let g = ball_grid(1.0 / 16.0);
        let rho = DensityGrid::from_fn(&g, |x| 1.0 + x.x);
        let dir = tempfile::tempdir().unwrap();
        write_dump(dir.path(), "rho", "rho", g.spec(), 0.5, &rho.to_full()).unwrap();
        let (hdr, vals) = read_dump(dir.path(), "rho").unwrap();
        assert_eq!(hdr.dims, g.spec().dims);
        assert_eq!(vals, rho.to_full());
    }
}
