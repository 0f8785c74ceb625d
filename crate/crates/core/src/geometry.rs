//! Smooth convex domains and the boundary-adapted coordinates used near the wall.
//!
//! A domain is described by an implicit function `Φ` that is negative inside,
//! zero on the boundary and positive outside. Near the boundary every point is
//! written as `x = x∥ − x⊥·n` where `x∥` is the closest boundary point, `n` the
//! outward normal and `x⊥ ≥ 0` the wall distance. Velocities split the same way,
//! `v = w₁u₁ + w₂u₂ − v⊥·n`, with `u₁, u₂` the principal directions at `x∥`.
//!
//! Sign conventions: `n` points outward, principal curvatures `k ≥ 0` for convex
//! domains, `b = −k ≤ 0`, and `E⊥ = −E·n`. With these conventions the tangential
//! metric factor of the boundary-adapted chart is `1 − k·x⊥`.

use nalgebra::{Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Relative tolerance (in units of the diameter) for projections and boundary tests.
pub const PROJECTION_TOL: f64 = 1e-12;
const PROJECTION_MAX_ITER: usize = 50;
const UMBILIC_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point {0:?} is not inside the domain")]
    OutsideDomain([f64; 3]),
    #[error("closest boundary point of {point:?} is not unique (depth {depth:.3e} exceeds tubular width {width:.3e})")]
    AmbiguousProjection { point: [f64; 3], depth: f64, width: f64 },
    #[error("principal frame is not resolvable at {0:?}")]
    DegenerateFrame([f64; 3]),
    #[error("metric factor 1 - k x_perp = {0:.3e} is not positive")]
    FrameInvalid(f64),
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

pub(crate) fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Shape parameters of a convex domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainShape {
    Ball { radius: f64 },
    Ellipsoid { semi_axes: [f64; 3] },
    /// `Σ qᵢ yᵢ² + pᵢ yᵢ⁴ = 1` with `qᵢ > 0`, `pᵢ ≥ 0`.
    LevelSet { quadratic: [f64; 3], quartic: [f64; 3] },
}

/// Domain block of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    #[serde(flatten)]
    pub shape: DomainShape,
    #[serde(default)]
    pub center: [f64; 3],
}

impl DomainSpec {
    pub fn build(&self) -> Result<ConvexDomain> {
        ConvexDomain::new(self.shape.clone(), Vec3::from(self.center))
    }
}

/// A smooth, strictly convex, bounded domain.
#[derive(Debug, Clone)]
pub struct ConvexDomain {
    shape: DomainShape,
    center: Vec3,
    diameter: f64,
    max_curvature: f64,
    tube_width: f64,
}

impl ConvexDomain {
    pub fn new(shape: DomainShape, center: Vec3) -> Result<Self> {
        let bad = |msg: String| Err(GeometryError::InvalidDomain(msg));
        if !center.iter().all(|c| c.is_finite()) {
            return bad("center must be finite".into());
        }
        match &shape {
            DomainShape::Ball { radius } => {
                if !(radius.is_finite() && *radius > 0.0) {
                    return bad(format!("radius must be positive, got {radius}"));
                }
            }
            DomainShape::Ellipsoid { semi_axes } => {
                if !semi_axes.iter().all(|a| a.is_finite() && *a > 0.0) {
                    return bad(format!("semi-axes must be positive, got {semi_axes:?}"));
                }
            }
            DomainShape::LevelSet { quadratic, quartic } => {
                if !quadratic.iter().all(|q| q.is_finite() && *q > 0.0) {
                    return bad(format!("quadratic coefficients must be positive, got {quadratic:?}"));
                }
                if !quartic.iter().all(|p| p.is_finite() && *p >= 0.0) {
                    return bad(format!("quartic coefficients must be non-negative, got {quartic:?}"));
                }
            }
        }
        let mut domain = ConvexDomain { shape, center, diameter: 1.0, max_curvature: 1.0, tube_width: 0.5 };
        let (diameter, max_curvature) = match &domain.shape {
            DomainShape::Ball { radius } => (2.0 * radius, 1.0 / radius),
            DomainShape::Ellipsoid { semi_axes } => {
                let amax = semi_axes.iter().cloned().fold(f64::MIN, f64::max);
                let amin = semi_axes.iter().cloned().fold(f64::MAX, f64::min);
                (2.0 * amax, amax / (amin * amin))
            }
            DomainShape::LevelSet { .. } => {
                let (rmax, kmax) = domain.sample_extremes(4000)?;
                // sampled maximum; pad it so the tube stays inside the focal set
                (2.0 * rmax, 1.05 * kmax)
            }
        };
        domain.diameter = diameter;
        domain.max_curvature = max_curvature;
        domain.tube_width = 0.5 / max_curvature;
        Ok(domain)
    }

    pub fn ball(radius: f64) -> Result<Self> {
        Self::new(DomainShape::Ball { radius }, Vec3::zeros())
    }

    pub fn ellipsoid(semi_axes: [f64; 3]) -> Result<Self> {
        Self::new(DomainShape::Ellipsoid { semi_axes }, Vec3::zeros())
    }

    pub fn shape(&self) -> &DomainShape {
        &self.shape
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    /// `L = diam Ω`.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn max_curvature(&self) -> f64 {
        self.max_curvature
    }

    /// Width `δ` of the tubular neighbourhood in which projection is unique.
    pub fn tube_width(&self) -> f64 {
        self.tube_width
    }

    /// All shapes here are real-analytic, so in particular C⁵.
    pub fn is_c5_smooth(&self) -> bool {
        true
    }

    /// Absolute tolerance for `|Φ|` on boundary points.
    pub fn boundary_tol(&self) -> f64 {
        PROJECTION_TOL * self.diameter
    }

    pub fn phi(&self, x: &Vec3) -> f64 {
        let y = x - self.center;
        match &self.shape {
            DomainShape::Ball { radius } => (y.norm_squared() - radius * radius) / (2.0 * radius),
            DomainShape::Ellipsoid { semi_axes: a } => {
                let s = a[0].min(a[1]).min(a[2]);
                let q = (y.x / a[0]).powi(2) + (y.y / a[1]).powi(2) + (y.z / a[2]).powi(2);
                0.5 * s * (q - 1.0)
            }
            DomainShape::LevelSet { quadratic: q, quartic: p } => {
                (0..3).map(|i| q[i] * y[i].powi(2) + p[i] * y[i].powi(4)).sum::<f64>() - 1.0
            }
        }
    }

    pub fn gradient(&self, x: &Vec3) -> Vec3 {
        let y = x - self.center;
        match &self.shape {
            DomainShape::Ball { radius } => y / *radius,
            DomainShape::Ellipsoid { semi_axes: a } => {
                let s = a[0].min(a[1]).min(a[2]);
                Vec3::new(s * y.x / (a[0] * a[0]), s * y.y / (a[1] * a[1]), s * y.z / (a[2] * a[2]))
            }
            DomainShape::LevelSet { quadratic: q, quartic: p } => {
                Vec3::from_fn(|i, _| 2.0 * q[i] * y[i] + 4.0 * p[i] * y[i].powi(3))
            }
        }
    }

    pub fn hessian(&self, x: &Vec3) -> Mat3 {
        let y = x - self.center;
        match &self.shape {
            DomainShape::Ball { radius } => Mat3::identity() / *radius,
            DomainShape::Ellipsoid { semi_axes: a } => {
                let s = a[0].min(a[1]).min(a[2]);
                Mat3::from_diagonal(&Vec3::new(s / (a[0] * a[0]), s / (a[1] * a[1]), s / (a[2] * a[2])))
            }
            DomainShape::LevelSet { quadratic: q, quartic: p } => {
                Mat3::from_diagonal(&Vec3::from_fn(|i, _| 2.0 * q[i] + 12.0 * p[i] * y[i].powi(2)))
            }
        }
    }

    /// Strict interior test.
    pub fn contains(&self, x: &Vec3) -> bool {
        self.phi(x) < 0.0
    }

    /// Closure test with the boundary tolerance.
    pub fn contains_closure(&self, x: &Vec3) -> bool {
        self.phi(x) <= self.boundary_tol()
    }

    /// Half-extents of the axis-aligned bounding box around the center.
    pub fn half_extents(&self) -> Vec3 {
        match &self.shape {
            DomainShape::Ball { radius } => Vec3::repeat(*radius),
            DomainShape::Ellipsoid { semi_axes } => Vec3::from(*semi_axes),
            DomainShape::LevelSet { quadratic: q, quartic: p } => Vec3::from_fn(|i, _| {
                if p[i] == 0.0 {
                    (1.0 / q[i]).sqrt()
                } else {
                    ((-q[i] + (q[i] * q[i] + 4.0 * p[i]).sqrt()) / (2.0 * p[i])).sqrt()
                }
            }),
        }
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let e = self.half_extents();
        (self.center - e, self.center + e)
    }

    /// Distance `t ≥ 0` along `dir` from an interior (or boundary) point to the
    /// boundary, i.e. `Φ(origin + t·dir) = 0`.
    pub fn ray_exit(&self, origin: &Vec3, dir: &Vec3) -> f64 {
        let y = origin - self.center;
        let quadratic_root = |a: f64, b: f64, c: f64| -> f64 {
            // c <= 0 for interior origins so the roots have opposite signs
            let disc = (b * b - 4.0 * a * c).max(0.0);
            let q = -0.5 * (b + b.signum() * disc.sqrt());
            if q == 0.0 {
                return 0.0;
            }
            (q / a).max(c / q).max(0.0)
        };
        match &self.shape {
            DomainShape::Ball { radius } => {
                quadratic_root(dir.norm_squared(), 2.0 * y.dot(dir), y.norm_squared() - radius * radius)
            }
            DomainShape::Ellipsoid { semi_axes: s } => {
                let ys = Vec3::new(y.x / s[0], y.y / s[1], y.z / s[2]);
                let ds = Vec3::new(dir.x / s[0], dir.y / s[1], dir.z / s[2]);
                quadratic_root(ds.norm_squared(), 2.0 * ys.dot(&ds), ys.norm_squared() - 1.0)
            }
            DomainShape::LevelSet { .. } => {
                let dn = dir.norm();
                if dn == 0.0 {
                    return 0.0;
                }
                let (mut lo, mut hi) = (0.0, 1.01 * self.diameter.max(1e-300) / dn);
                while self.phi(&(origin + hi * dir)) <= 0.0 {
                    hi *= 2.0;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if self.phi(&(origin + mid * dir)) <= 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                lo
            }
        }
    }

    /// Boundary point seen from the center in direction `dir`.
    pub fn boundary_point_along(&self, dir: &Vec3) -> Vec3 {
        let d = dir.normalize();
        self.center + self.ray_exit(&self.center, &d) * d
    }

    pub fn volume(&self) -> f64 {
        use std::f64::consts::PI;
        match &self.shape {
            DomainShape::Ball { radius } => 4.0 / 3.0 * PI * radius.powi(3),
            DomainShape::Ellipsoid { semi_axes: a } => 4.0 / 3.0 * PI * a[0] * a[1] * a[2],
            DomainShape::LevelSet { .. } => {
                // ∫ r(ω)³/3 dω, Gauss–Legendre in cos θ times trapezoid in azimuth
                let (nodes, weights) = gauss_legendre(64);
                let n_az = 128;
                let mut total = 0.0;
                for (z, wz) in nodes.iter().zip(&weights) {
                    let s = (1.0 - z * z).max(0.0).sqrt();
                    for j in 0..n_az {
                        let az = 2.0 * PI * j as f64 / n_az as f64;
                        let d = Vec3::new(s * az.cos(), s * az.sin(), *z);
                        let r = self.ray_exit(&self.center, &d);
                        total += wz * r.powi(3) / 3.0;
                    }
                }
                total * 2.0 * PI / n_az as f64
            }
        }
    }

    /// Quasi-uniform boundary sample (Fibonacci directions seen from the center).
    pub fn boundary_samples(&self, n: usize) -> Vec<Vec3> {
        fibonacci_directions(n).iter().map(|d| self.boundary_point_along(d)).collect()
    }

    fn sample_extremes(&self, n: usize) -> Result<(f64, f64)> {
        let mut rmax: f64 = 0.0;
        let mut kmax: f64 = 0.0;
        for p in self.boundary_samples(n) {
            rmax = rmax.max((p - self.center).norm());
            let (_, _, k) = principal_frame(self, &p)?;
            kmax = kmax.max(k[0]).max(k[1]);
        }
        if kmax <= 0.0 {
            return Err(GeometryError::InvalidDomain("boundary is not strictly convex".into()));
        }
        Ok((rmax, kmax))
    }

    /// Closest boundary point to `y` by Newton iteration on the Lagrange system
    /// `p − y + λ∇Φ(p) = 0`, `Φ(p) = 0`. Works for points on either side of the wall.
    pub fn closest_boundary_point(&self, y: &Vec3) -> Result<Vec3> {
        if let DomainShape::Ball { radius } = &self.shape {
            let r = y - self.center;
            let rn = r.norm();
            if rn == 0.0 {
                return Err(GeometryError::AmbiguousProjection {
                    point: arr(y),
                    depth: *radius,
                    width: self.tube_width,
                });
            }
            return Ok(self.center + r * (*radius / rn));
        }
        let g0 = self.gradient(y);
        let mut p = if self.phi(y) <= 0.0 && g0.norm() > 0.0 {
            // ray march along the gradient to the wall
            y + self.ray_exit(y, &g0.normalize()) * g0.normalize()
        } else {
            let d = y - self.center;
            if d.norm() == 0.0 {
                return Err(GeometryError::AmbiguousProjection { point: arr(y), depth: f64::NAN, width: self.tube_width });
            }
            self.boundary_point_along(&d)
        };
        let gp = self.gradient(&p);
        let mut lambda = -(p - y).dot(&gp) / gp.norm_squared();
        let tol = PROJECTION_TOL * self.diameter;
        for _ in 0..PROJECTION_MAX_ITER {
            let g = self.gradient(&p);
            let h = self.hessian(&p);
            let r1 = p - y + lambda * g;
            let r2 = self.phi(&p);
            let jm = h * lambda + Mat3::identity();
            let jac = Matrix4::new(
                jm[(0, 0)], jm[(0, 1)], jm[(0, 2)], g.x,
                jm[(1, 0)], jm[(1, 1)], jm[(1, 2)], g.y,
                jm[(2, 0)], jm[(2, 1)], jm[(2, 2)], g.z,
                g.x, g.y, g.z, 0.0,
            );
            let rhs = -Vector4::new(r1.x, r1.y, r1.z, r2);
            let step = jac.lu().solve(&rhs).ok_or(GeometryError::DegenerateFrame(arr(&p)))?;
            p += Vec3::new(step[0], step[1], step[2]);
            lambda += step[3];
            if Vec3::new(step[0], step[1], step[2]).norm() <= tol {
                // one cheap polish of Φ along the normal
                let g = self.gradient(&p);
                p -= self.phi(&p) * g / g.norm_squared();
                return Ok(p);
            }
        }
        Err(GeometryError::AmbiguousProjection { point: arr(y), depth: f64::NAN, width: self.tube_width })
    }

    /// Closest boundary point and full frame for a point strictly inside Ω and
    /// within the tubular neighbourhood.
    pub fn project_to_boundary(&self, x: &Vec3) -> Result<BoundaryFrame> {
        if self.phi(x) >= 0.0 {
            return Err(GeometryError::OutsideDomain(arr(x)));
        }
        self.project_closure(x)
    }

    /// Like [`project_to_boundary`](Self::project_to_boundary) but accepts points
    /// on the wall (within the boundary tolerance), where `x⊥ = 0`.
    pub fn project_closure(&self, x: &Vec3) -> Result<BoundaryFrame> {
        let phi = self.phi(x);
        if phi > self.boundary_tol() {
            return Err(GeometryError::OutsideDomain(arr(x)));
        }
        if let DomainShape::Ball { radius } = &self.shape {
            let depth = radius - (x - self.center).norm();
            if depth > self.tube_width {
                return Err(GeometryError::AmbiguousProjection { point: arr(x), depth, width: self.tube_width });
            }
        }
        let p = self.closest_boundary_point(x)?;
        let depth = (p - x).norm();
        if depth > self.tube_width {
            return Err(GeometryError::AmbiguousProjection { point: arr(x), depth, width: self.tube_width });
        }
        let mut frame = self.frame_curvatures(&p)?;
        // x on the wall (phi ~ 0) may sit a hair outside: clamp the depth at zero
        frame.x_perp = if phi >= 0.0 { 0.0 } else { (p - x).dot(&frame.normal).max(0.0) };
        Ok(frame)
    }

    /// Boundary frame at a boundary point: normal, principal directions and
    /// curvatures, second fundamental form coefficients and the Christoffel
    /// symbols of the Monge chart at that point.
    pub fn frame_curvatures(&self, p: &Vec3) -> Result<BoundaryFrame> {
        let (normal, u, k) = principal_frame(self, p)?;
        let chart = MongeChart { domain: self, base: *p, u, normal };
        let christoffel = chart.christoffel([0.0, 0.0])?;
        Ok(BoundaryFrame {
            point: *p,
            mu: surface_parameters(&(p - self.center)),
            x_perp: 0.0,
            normal,
            u,
            k,
            b: [-k[0], -k[1]],
            christoffel,
        })
    }

    /// Cartesian `(x, v)` to boundary-adapted coordinates.
    pub fn to_local(&self, x: &Vec3, v: &Vec3) -> Result<(LocalPhase, BoundaryFrame)> {
        let frame = self.project_closure(x)?;
        let lp = LocalPhase {
            mu: frame.mu,
            x_perp: frame.x_perp,
            w: [v.dot(&frame.u[0]), v.dot(&frame.u[1])],
            v_perp: -v.dot(&frame.normal),
        };
        Ok((lp, frame))
    }

    /// Inverse of [`to_local`](Self::to_local).
    pub fn from_local(&self, lp: &LocalPhase) -> Result<(Vec3, Vec3)> {
        let dir = direction_from_parameters(lp.mu);
        let p = self.boundary_point_along(&dir);
        let frame = self.frame_curvatures(&p)?;
        let x = p - lp.x_perp * frame.normal;
        let v = lp.w[0] * frame.u[0] + lp.w[1] * frame.u[1] - lp.v_perp * frame.normal;
        Ok((x, v))
    }

    /// `x⊥ + v⊥²`, the distance proxy to the singular set of grazing boundary
    /// phase points. Zero exactly on that set.
    pub fn singular_set_distance(&self, x: &Vec3, v: &Vec3) -> Result<f64> {
        let (lp, _) = self.to_local(x, v)?;
        Ok(lp.x_perp + lp.v_perp * lp.v_perp)
    }
}

/// Boundary-adapted coordinates `(μ₁, μ₂, x⊥, w₁, w₂, v⊥)`.
///
/// `μ` are the polar and azimuthal angles of the foot point seen from the
/// domain center; `w` are tangential velocity components in the principal
/// frame and `v⊥ = dx⊥/dt` is positive when moving away from the wall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalPhase {
    pub mu: [f64; 2],
    pub x_perp: f64,
    pub w: [f64; 2],
    pub v_perp: f64,
}

impl LocalPhase {
    pub fn speed_squared(&self) -> f64 {
        self.w[0] * self.w[0] + self.w[1] * self.w[1] + self.v_perp * self.v_perp
    }
}

/// Local boundary data at the foot point of a query.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFrame {
    pub point: Vec3,
    pub mu: [f64; 2],
    pub x_perp: f64,
    pub normal: Vec3,
    /// Principal directions, orthonormal, `u[1] = n × u[0]`.
    pub u: [Vec3; 2],
    /// Principal curvatures, `k[0] ≥ k[1] ≥ 0` on convex domains.
    pub k: [f64; 2],
    /// Second fundamental form coefficients `bᵢ = −kᵢ|uᵢ|²`.
    pub b: [f64; 2],
    /// `christoffel[i][j][l] = Γⁱⱼₗ` of the Monge chart at the foot point.
    pub christoffel: [[[f64; 2]; 2]; 2],
}

impl BoundaryFrame {
    /// `1 − kᵢ·x⊥` for the given wall distance.
    pub fn metric_factor(&self, i: usize, x_perp: f64) -> f64 {
        1.0 - self.k[i] * x_perp
    }

    pub fn check_metric(&self, x_perp: f64) -> Result<[f64; 2]> {
        let m = [self.metric_factor(0, x_perp), self.metric_factor(1, x_perp)];
        for f in m {
            if f <= 0.0 {
                return Err(GeometryError::FrameInvalid(f));
            }
        }
        Ok(m)
    }

    /// Query point `x∥ − x⊥ n`.
    pub fn interior_point(&self) -> Vec3 {
        self.point - self.x_perp * self.normal
    }
}

fn surface_parameters(d: &Vec3) -> [f64; 2] {
    [(d.x * d.x + d.y * d.y).sqrt().atan2(d.z), d.y.atan2(d.x)]
}

fn direction_from_parameters(mu: [f64; 2]) -> Vec3 {
    let (st, ct) = mu[0].sin_cos();
    let (sp, cp) = mu[1].sin_cos();
    Vec3::new(st * cp, st * sp, ct)
}

/// Deterministic tangent pair: Gram–Schmidt of the global axis least aligned
/// with `n`, then `t₂ = n × t₁`.
pub fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let mut axis = 0;
    for i in 1..3 {
        if n[i].abs() < n[axis].abs() {
            axis = i;
        }
    }
    let mut e = Vec3::zeros();
    e[axis] = 1.0;
    let t1 = (e - e.dot(n) * n).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

fn principal_frame(domain: &ConvexDomain, p: &Vec3) -> Result<(Vec3, [Vec3; 2], [f64; 2])> {
    let g = domain.gradient(p);
    let gn = g.norm();
    if !(gn > 0.0 && gn.is_finite()) {
        return Err(GeometryError::DegenerateFrame(arr(p)));
    }
    let n = g / gn;
    let hess = domain.hessian(p);
    let (t1, t2) = tangent_basis(&n);
    let a = t1.dot(&(hess * t1)) / gn;
    let bb = t1.dot(&(hess * t2)) / gn;
    let c = t2.dot(&(hess * t2)) / gn;
    let mean = 0.5 * (a + c);
    let rad = (0.25 * (a - c).powi(2) + bb * bb).sqrt();
    let (k1, k2) = (mean + rad, mean - rad);
    if !(k1.is_finite() && k2.is_finite()) {
        return Err(GeometryError::DegenerateFrame(arr(p)));
    }
    let scale = k1.abs().max(k2.abs()).max(f64::MIN_POSITIVE);
    let u1 = if (k1 - k2).abs() < UMBILIC_TOL * scale {
        t1
    } else {
        let c1 = (bb, k1 - a);
        let c2 = (k1 - c, bb);
        let (e0, e1) = if c1.0.hypot(c1.1) >= c2.0.hypot(c2.1) { c1 } else { c2 };
        let norm = e0.hypot(e1);
        if norm == 0.0 {
            return Err(GeometryError::DegenerateFrame(arr(p)));
        }
        let mut u = (e0 * t1 + e1 * t2) / norm;
        let s = u.dot(&t1);
        if s < 0.0 || (s == 0.0 && u.dot(&t2) < 0.0) {
            u = -u;
        }
        u
    };
    let u2 = n.cross(&u1);
    Ok((n, [u1, u2], [k1, k2]))
}

/// Graph chart `μ ↦ base + μ₁u₁ + μ₂u₂ + h(μ)·n` over the tangent plane.
pub struct MongeChart<'a> {
    pub domain: &'a ConvexDomain,
    pub base: Vec3,
    pub u: [Vec3; 2],
    pub normal: Vec3,
}

impl MongeChart<'_> {
    /// Surface point over chart coordinates `μ`.
    pub fn point(&self, mu: [f64; 2]) -> Result<Vec3> {
        let q = self.base + mu[0] * self.u[0] + mu[1] * self.u[1];
        let mut h = 0.0;
        let tol = PROJECTION_TOL * self.domain.diameter();
        for _ in 0..PROJECTION_MAX_ITER {
            let y = q + h * self.normal;
            let gn = self.domain.gradient(&y).dot(&self.normal);
            if gn.abs() < f64::EPSILON {
                break;
            }
            let dh = -self.domain.phi(&y) / gn;
            h += dh;
            if dh.abs() <= tol {
                return Ok(q + h * self.normal);
            }
        }
        Err(GeometryError::DegenerateFrame(arr(&q)))
    }

    /// Height function with its first and second derivatives at `μ`, by
    /// implicit differentiation of `Φ(base + μ·u + h n) = 0`.
    pub fn height_jet(&self, mu: [f64; 2]) -> Result<(f64, [f64; 2], [[f64; 2]; 2])> {
        let y = self.point(mu)?;
        let h = (y - self.base).dot(&self.normal);
        let g = self.domain.gradient(&y);
        let hess = self.domain.hessian(&y);
        let gh = g.dot(&self.normal);
        if gh.abs() < f64::EPSILON {
            return Err(GeometryError::DegenerateFrame(arr(&y)));
        }
        let d1 = [-g.dot(&self.u[0]) / gh, -g.dot(&self.u[1]) / gh];
        let hnn = self.normal.dot(&(hess * self.normal));
        let mut d2 = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let gij = self.u[i].dot(&(hess * self.u[j]));
                let gih = self.u[i].dot(&(hess * self.normal));
                let gjh = self.u[j].dot(&(hess * self.normal));
                d2[i][j] = -(gij + gih * d1[j] + gjh * d1[i] + hnn * d1[i] * d1[j]) / gh;
            }
        }
        Ok((h, d1, d2))
    }

    /// Christoffel symbols `Γⁱⱼₗ = hᵢ h_{jl} / (1 + |∇h|²)` of the graph metric.
    pub fn christoffel(&self, mu: [f64; 2]) -> Result<[[[f64; 2]; 2]; 2]> {
        let (_, d1, d2) = self.height_jet(mu)?;
        let denom = 1.0 + d1[0] * d1[0] + d1[1] * d1[1];
        let mut gamma = [[[0.0; 2]; 2]; 2];
        for (i, gi) in gamma.iter_mut().enumerate() {
            for j in 0..2 {
                for l in 0..2 {
                    gi[j][l] = d1[i] * d2[j][l] / denom;
                }
            }
        }
        Ok(gamma)
    }
}

/// Quasi-uniform unit vectors on the sphere.
pub fn fibonacci_directions(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let az = golden * i as f64;
            Vec3::new(r * az.cos(), r * az.sin(), z)
        })
        .collect()
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    use std::f64::consts::PI;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pnm1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = z;
        weights[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ball_projection_radial() {
        let d = ConvexDomain::ball(1.0).unwrap();
        let f = d.project_to_boundary(&Vec3::new(0.5, 0.0, 0.0)).unwrap();
        assert_relative_eq!(f.point, Vec3::new(1.0, 0.0, 0.0), epsilon = 1e-14);
        assert_relative_eq!(f.x_perp, 0.5, epsilon = 1e-14);
        assert_relative_eq!(f.normal, Vec3::new(1.0, 0.0, 0.0), epsilon = 1e-14);
    }

    #[test]
    fn ball_center_is_ambiguous() {
        let d = ConvexDomain::ball(1.0).unwrap();
        let err = d.project_to_boundary(&Vec3::zeros()).unwrap_err();
        assert!(matches!(err, GeometryError::AmbiguousProjection { .. }));
        let err = d.project_to_boundary(&Vec3::new(0.0, 0.0, 1.5)).unwrap_err();
        assert!(matches!(err, GeometryError::OutsideDomain(_)));
    }

    #[test]
    fn sphere_curvatures() {
        for r in [1.0, 2.0] {
            let d = ConvexDomain::ball(r).unwrap();
            for p in d.boundary_samples(50) {
                let f = d.frame_curvatures(&p).unwrap();
                assert_relative_eq!(f.k[0], 1.0 / r, epsilon = 1e-12);
                assert_relative_eq!(f.k[1], 1.0 / r, epsilon = 1e-12);
                assert_relative_eq!(f.b[0], -1.0 / r, epsilon = 1e-12);
                assert!(f.u[0].dot(&f.normal).abs() < 1e-14);
                assert!(f.u[1].dot(&f.normal).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn local_examples_in_ball() {
        let d = ConvexDomain::ball(1.0).unwrap();
        let x = Vec3::new(0.5, 0.0, 0.0);
        let (lp, _) = d.to_local(&x, &Vec3::new(-1.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(lp.v_perp, 1.0, epsilon = 1e-14);
        assert!(lp.w[0].abs() < 1e-14 && lp.w[1].abs() < 1e-14);
        let (lp, _) = d.to_local(&x, &Vec3::new(0.0, 1.0, 0.0)).unwrap();
        assert!(lp.v_perp.abs() < 1e-14);
        assert_relative_eq!(lp.w[0].hypot(lp.w[1]), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn singular_set_distance_examples() {
        let d = ConvexDomain::ball(1.0).unwrap();
        let s = d.singular_set_distance(&Vec3::new(1.0, 0.0, 0.0), &Vec3::new(0.0, 0.3, 0.1)).unwrap();
        assert!(s.abs() < 1e-14);
        let s = d.singular_set_distance(&Vec3::new(0.9, 0.0, 0.0), &Vec3::new(0.0, 1.0, 0.0)).unwrap();
        assert_relative_eq!(s, 0.1, epsilon = 1e-14);
        let s = d.singular_set_distance(&Vec3::new(1.0, 0.0, 0.0), &Vec3::new(-0.2, 0.0, 0.0)).unwrap();
        assert_relative_eq!(s, 0.04, epsilon = 1e-14);
    }

    #[test]
    fn invalid_domains_rejected() {
        assert!(ConvexDomain::ball(-1.0).is_err());
        assert!(ConvexDomain::ellipsoid([1.0, 0.0, 1.0]).is_err());
        let shape = DomainShape::LevelSet { quadratic: [1.0, -1.0, 1.0], quartic: [0.0; 3] };
        assert!(ConvexDomain::new(shape, Vec3::zeros()).is_err());
    }

    #[test]
    fn tube_width_from_curvature() {
        assert_relative_eq!(ConvexDomain::ball(2.0).unwrap().tube_width(), 1.0);
        assert_relative_eq!(ConvexDomain::ellipsoid([2.0, 1.0, 1.0]).unwrap().tube_width(), 0.25);
    }

    #[test]
    fn ray_exit_level_set_matches_phi() {
        let shape = DomainShape::LevelSet { quadratic: [1.0, 1.5, 2.0], quartic: [0.5, 0.0, 1.0] };
        let d = ConvexDomain::new(shape, Vec3::new(0.1, -0.2, 0.3)).unwrap();
        for dir in fibonacci_directions(40) {
            let p = d.boundary_point_along(&dir);
            assert!(d.phi(&p).abs() < 1e-13);
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert_relative_eq!(s, 2.0 / 15.0, epsilon = 1e-14);
    }

    #[test]
    fn volumes() {
        use std::f64::consts::PI;
        let shape = DomainShape::LevelSet { quadratic: [0.25, 1.0, 1.0], quartic: [0.0; 3] };
        let d = ConvexDomain::new(shape, Vec3::zeros()).unwrap();
        assert_relative_eq!(d.volume(), 4.0 / 3.0 * PI * 2.0, max_relative = 1e-9);
        assert_relative_eq!(d.diameter(), 4.0, max_relative = 1e-3);
    }
}
