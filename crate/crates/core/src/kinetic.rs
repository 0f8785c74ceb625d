//! Weighted particle representation of `f`, charge deposition, the
//! self-consistent leapfrog loop, the frozen-field Picard iteration and the
//! conservation / support ledgers.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{half_kick, split_step, DynamicsError, StepFields};
use crate::field::{
    decompose, hopf_margin, solve_poisson, DensityGrid, FieldError, ForceField, PotentialField,
};
use crate::geometry::{fibonacci_directions, gauss_legendre, ConvexDomain, GeometryError, Vec3};
use crate::grid::{compensated_sum, CellGrid, CellKind};

/// Relative tolerance on deposited mass against the particle weights.
pub const MASS_TOL: f64 = 1e-10;
/// Slack on the density bound `ρ ≤ (4π/3)‖f₀‖∞Q³`.
pub const DENSITY_SLACK: f64 = 1.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KineticError {
    #[error("initial data has empty support")]
    EmptySupport,
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("particle {index} at {point:?} is outside the domain")]
    ParticleOutside { index: usize, point: [f64; 3] },
    #[error("Q(t) = {q:.6e} exceeds the ceiling {ceiling:.6e} at t = {t}")]
    BlowupSuspected { t: f64, q: f64, ceiling: f64 },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Library of analytic initial distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Profile {
    /// `A (1 − |x−c|²/R²)²₊ · exp(−|v|²/2σ²) · 1{|v| ≤ v_cut}`.
    MaxwellianBump { amplitude: f64, #[serde(default)] center: [f64; 3], x_radius: f64, v_thermal: f64, v_cut: f64 },
    /// Uniform in `|v| ≤ v_max` with spatial density `density` on the shell
    /// `inner ≤ t ≤ outer`, where `t` is the fraction of the way from the center
    /// to the wall. `v_max = 0` gives a cold shell.
    RadialShell { density: f64, inner: f64, outer: f64, v_max: f64 },
    /// `value` on a box in phase space; the spatial box must lie in Ω.
    UniformBox { value: f64, x_min: [f64; 3], x_max: [f64; 3], v_min: [f64; 3], v_max: [f64; 3] },
    /// `value` for `|v| ≤ v_max`, all of Ω.
    Isotropic { value: f64, v_max: f64 },
    /// `value (1 + skew·tanh(v·r̂))`, `r̂` radial from the domain center, `|v| ≤ v_max`.
    /// Odd in the normal velocity at the wall of a ball.
    OddNormal { value: f64, v_max: f64, skew: f64 },
}

fn radial_dir(u: f64, w: f64) -> Vec3 {
    let ct = 1.0 - 2.0 * u;
    let st = (1.0 - ct * ct).max(0.0).sqrt();
    let (sp, cp) = (2.0 * PI * w).sin_cos();
    Vec3::new(st * cp, st * sp, ct)
}

fn maxwell_shape(s: f64, sigma: f64) -> f64 {
    (-0.5 * s * s / (sigma * sigma)).exp()
}

/// `∫₀^b g(s)·4πs² ds` by Gauss–Legendre.
fn radial_integral(b: f64, g: impl Fn(f64) -> f64) -> f64 {
    let (nodes, weights) = gauss_legendre(64);
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(&weights) {
        let s = 0.5 * b * (x + 1.0);
        acc += w * g(s) * 4.0 * PI * s * s;
    }
    0.5 * b * acc
}

impl Default for Profile {
    /// Maxwellian in velocity times a bump of radius 0.7 around the origin.
    fn default() -> Self {
        Profile::MaxwellianBump { amplitude: 4.0, center: [0.0; 3], x_radius: 0.7, v_thermal: 0.25, v_cut: 1.0 }
    }
}

impl Profile {
    pub fn validate(&self, domain: &ConvexDomain) -> Result<(), KineticError> {
        let bad = |m: &str| Err(KineticError::InvalidProfile(m.to_string()));
        let finite = |v: f64| v.is_finite();
        match self {
            Profile::MaxwellianBump { amplitude, center, x_radius, v_thermal, v_cut } => {
                if !(*amplitude >= 0.0 && finite(*amplitude)) {
                    return bad("amplitude must be non-negative");
                }
                if !(*x_radius > 0.0 && *v_thermal > 0.0 && *v_cut > 0.0) || !finite(*x_radius + *v_thermal + *v_cut) {
                    return bad("x_radius, v_thermal and v_cut must be positive");
                }
                let c = Vec3::from(*center);
                if fibonacci_directions(2000).iter().any(|d| !domain.contains(&(c + *x_radius * d))) {
                    return bad("bump support must lie inside the domain");
                }
            }
            Profile::RadialShell { density, inner, outer, v_max } => {
                if !(*density >= 0.0 && *v_max >= 0.0) || !finite(*density + *v_max) {
                    return bad("density and v_max must be non-negative");
                }
                if !(0.0 <= *inner && inner < outer && *outer < 1.0) {
                    return bad("shell needs 0 <= inner < outer < 1");
                }
            }
            Profile::UniformBox { value, x_min, x_max, v_min, v_max } => {
                if !(*value >= 0.0 && finite(*value)) {
                    return bad("value must be non-negative");
                }
                if (0..3).any(|a| !(x_min[a] < x_max[a] && v_min[a] < v_max[a])) {
                    return bad("box bounds must be increasing");
                }
                for corner in 0..8 {
                    let p = Vec3::from_fn(|a, _| if corner >> a & 1 == 1 { x_max[a] } else { x_min[a] });
                    if !domain.contains(&p) {
                        return bad("spatial box must lie inside the domain");
                    }
                }
            }
            Profile::Isotropic { value, v_max } => {
                if !(*value >= 0.0 && *v_max > 0.0) || !finite(*value + *v_max) {
                    return bad("value must be non-negative and v_max positive");
                }
            }
            Profile::OddNormal { value, v_max, skew } => {
                if !(*value >= 0.0 && *v_max > 0.0 && skew.abs() <= 1.0) || !finite(*value + *v_max) {
                    return bad("need value >= 0, v_max > 0 and |skew| <= 1");
                }
            }
        }
        Ok(())
    }

    /// Fraction of the way from the domain center to the wall, and the wall distance along that ray.
    fn star_coordinate(domain: &ConvexDomain, x: &Vec3) -> (f64, f64) {
        let y = x - domain.center();
        let r = y.norm();
        if r == 0.0 {
            return (0.0, 1.0);
        }
        let rho = domain.ray_exit(&domain.center(), &(y / r));
        (r / rho, rho)
    }

    /// `f₀(x, v)`; zero outside the closure of Ω.
    pub fn value(&self, domain: &ConvexDomain, x: &Vec3, v: &Vec3) -> f64 {
        if !domain.contains_closure(x) {
            return 0.0;
        }
        match self {
            Profile::MaxwellianBump { amplitude, center, x_radius, v_thermal, v_cut } => {
                let s = (x - Vec3::from(*center)).norm_squared() / (x_radius * x_radius);
                let speed = v.norm();
                if s >= 1.0 || speed > *v_cut {
                    0.0
                } else {
                    amplitude * (1.0 - s).powi(2) * maxwell_shape(speed, *v_thermal)
                }
            }
            Profile::RadialShell { density, inner, outer, v_max } => {
                let (t, _) = Self::star_coordinate(domain, x);
                if t < *inner || t > *outer || v.norm() > *v_max {
                    0.0
                } else if *v_max == 0.0 {
                    f64::INFINITY
                } else {
                    density / (4.0 / 3.0 * PI * v_max.powi(3))
                }
            }
            Profile::UniformBox { value, x_min, x_max, v_min, v_max } => {
                let inside = (0..3).all(|a| x_min[a] <= x[a] && x[a] <= x_max[a] && v_min[a] <= v[a] && v[a] <= v_max[a]);
                if inside { *value } else { 0.0 }
            }
            Profile::Isotropic { value, v_max } => {
                if v.norm() <= *v_max { *value } else { 0.0 }
            }
            Profile::OddNormal { value, v_max, skew } => {
                if v.norm() > *v_max {
                    return 0.0;
                }
                let y = x - domain.center();
                let r = y.norm();
                let vr = if r > 0.0 { v.dot(&y) / r } else { 0.0 };
                value * (1.0 + skew * vr.tanh())
            }
        }
    }

    /// `‖f₀‖∞`.
    pub fn sup(&self) -> f64 {
        match self {
            Profile::MaxwellianBump { amplitude, .. } => *amplitude,
            Profile::RadialShell { density, v_max, .. } => {
                if *density == 0.0 {
                    0.0
                } else if *v_max == 0.0 {
                    f64::INFINITY
                } else {
                    density / (4.0 / 3.0 * PI * v_max.powi(3))
                }
            }
            Profile::UniformBox { value, .. } | Profile::Isotropic { value, .. } => *value,
            Profile::OddNormal { value, v_max, skew } => value * (1.0 + skew.abs() * v_max.tanh()),
        }
    }

    /// Radius of the velocity support, an upper bound for `Q(0)`.
    pub fn v_support(&self) -> f64 {
        match self {
            Profile::MaxwellianBump { v_cut, .. } => *v_cut,
            Profile::RadialShell { v_max, .. } | Profile::Isotropic { v_max, .. } | Profile::OddNormal { v_max, .. } => *v_max,
            Profile::UniformBox { v_min, v_max, .. } => {
                (0..3).map(|a| v_min[a].abs().max(v_max[a].abs()).powi(2)).sum::<f64>().sqrt()
            }
        }
    }

    /// Radius of the spatial support about `center`, as an upper bound.
    pub fn x_support(&self, domain: &ConvexDomain) -> f64 {
        match self {
            Profile::MaxwellianBump { x_radius, .. } => *x_radius,
            Profile::UniformBox { x_min, x_max, .. } => {
                0.5 * (0..3).map(|a| (x_max[a] - x_min[a]).powi(2)).sum::<f64>().sqrt()
            }
            _ => 0.5 * domain.diameter(),
        }
    }

    /// `∫ f₀(x, v) dv`.
    pub fn spatial_density(&self, domain: &ConvexDomain, x: &Vec3) -> f64 {
        if !domain.contains_closure(x) {
            return 0.0;
        }
        match self {
            Profile::MaxwellianBump { amplitude, center, x_radius, v_thermal, v_cut } => {
                let s = (x - Vec3::from(*center)).norm_squared() / (x_radius * x_radius);
                if s >= 1.0 {
                    0.0
                } else {
                    amplitude * (1.0 - s).powi(2) * radial_integral(*v_cut, |q| maxwell_shape(q, *v_thermal))
                }
            }
            Profile::RadialShell { density, inner, outer, .. } => {
                let (t, _) = Self::star_coordinate(domain, x);
                if t < *inner || t > *outer { 0.0 } else { *density }
            }
            Profile::UniformBox { value, x_min, x_max, v_min, v_max } => {
                if (0..3).all(|a| x_min[a] <= x[a] && x[a] <= x_max[a]) {
                    value * (0..3).map(|a| v_max[a] - v_min[a]).product::<f64>()
                } else {
                    0.0
                }
            }
            // the odd part integrates to zero over the velocity ball
            Profile::Isotropic { value, v_max } | Profile::OddNormal { value, v_max, .. } => {
                value * 4.0 / 3.0 * PI * v_max.powi(3)
            }
        }
    }

    /// `∫∫ f₀` by quadrature.
    pub fn exact_mass(&self, domain: &ConvexDomain) -> f64 {
        match self {
            Profile::MaxwellianBump { amplitude, x_radius, v_thermal, v_cut, .. } => {
                amplitude * 4.0 * PI * x_radius.powi(3) * 8.0 / 105.0
                    * radial_integral(*v_cut, |q| maxwell_shape(q, *v_thermal))
            }
            Profile::RadialShell { density, inner, outer, .. } => {
                density * domain.volume() * (outer.powi(3) - inner.powi(3))
            }
            Profile::UniformBox { value, x_min, x_max, v_min, v_max } => {
                value * (0..3).map(|a| (x_max[a] - x_min[a]) * (v_max[a] - v_min[a])).product::<f64>()
            }
            Profile::Isotropic { value, v_max } | Profile::OddNormal { value, v_max, .. } => {
                value * domain.volume() * 4.0 / 3.0 * PI * v_max.powi(3)
            }
        }
    }
}

/// Piecewise-linear inverse CDF of a radial density `g(r)·r²` on `[0, r_max]`.
struct RadialTable {
    r: Vec<f64>,
    cdf: Vec<f64>,
}

impl RadialTable {
    const SIZE: usize = 16384;

    fn new(r_max: f64, g: impl Fn(f64) -> f64) -> Self {
        let n = Self::SIZE;
        let r: Vec<f64> = (0..=n).map(|i| r_max * i as f64 / n as f64).collect();
        let mut cdf = vec![0.0; n + 1];
        for i in 0..n {
            // Simpson on each panel
            let (a, b) = (r[i], r[i + 1]);
            let m = 0.5 * (a + b);
            let f = |s: f64| g(s) * s * s;
            cdf[i + 1] = cdf[i] + (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b));
        }
        RadialTable { r, cdf }
    }

    /// Radius and `dr/du` for `u ∈ [0, 1)`.
    fn map(&self, u: f64) -> (f64, f64) {
        let total = *self.cdf.last().unwrap();
        let c = u * total;
        let i = match self.cdf.binary_search_by(|p| p.partial_cmp(&c).unwrap()) {
            Ok(i) => i.min(self.cdf.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.cdf.len() - 2),
        };
        let mut j = i;
        while j + 2 < self.cdf.len() && self.cdf[j + 1] <= self.cdf[j] {
            j += 1;
        }
        let dc = self.cdf[j + 1] - self.cdf[j];
        let dr = self.r[j + 1] - self.r[j];
        let r = self.r[j] + (c - self.cdf[j]).max(0.0) / dc * dr;
        (r, total * dr / dc)
    }
}

/// Radical inverse of `i` in base `b`.
fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let inv = 1.0 / b as f64;
    let mut f = inv;
    let mut acc = 0.0;
    while i > 0 {
        acc += f * (i % b) as f64;
        i /= b;
        f *= inv;
    }
    acc
}

const HALTON_BASES: [u64; 6] = [2, 3, 5, 7, 11, 13];

/// Randomly shifted Halton point `i` in `[0,1)⁶`.
fn halton_point(i: u64, shift: &[f64; 6]) -> [f64; 6] {
    let mut u = [0.0; 6];
    for d in 0..6 {
        let x = radical_inverse(i + 1, HALTON_BASES[d]) + shift[d];
        u[d] = x - x.floor();
    }
    u
}

/// Initial distribution with its flatness metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialData {
    #[serde(default)]
    pub profile: Profile,
    /// Width of the flat band `x⊥ + v⊥² ≤ δ₀`; defaults to `0.02·L`.
    #[serde(default)]
    pub delta0: Option<f64>,
    /// Expected constant value on the flat band; the wall value is used if absent.
    #[serde(default)]
    pub flat_value: Option<f64>,
    /// Hölder exponent, metadata only.
    #[serde(default = "default_holder")]
    pub holder_exponent: f64,
}

fn default_holder() -> f64 {
    0.5
}

impl InitialData {
    pub fn new(profile: Profile) -> Self {
        InitialData { profile, delta0: None, flat_value: None, holder_exponent: default_holder() }
    }

    pub fn delta0(&self, domain: &ConvexDomain) -> f64 {
        self.delta0.unwrap_or(0.02 * domain.diameter())
    }
}

/// Weighted particles. Weights and `f₀` tags never change after sampling.
#[derive(Debug, Clone, Default)]
pub struct ParticleEnsemble {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub weight: Vec<f64>,
    /// `f₀` at the sampled phase point.
    pub f0: Vec<f64>,
    /// `max |v|` at creation.
    pub q0: f64,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        compensated_sum(self.weight.iter().copied())
    }

    /// `Σ w |v|²`, the particle form of `∫v²f`.
    pub fn kinetic_energy(&self) -> f64 {
        compensated_sum(self.weight.iter().zip(&self.v).map(|(w, v)| w * v.norm_squared()))
    }

    pub fn max_speed(&self) -> f64 {
        self.v.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Sorted bit patterns of `(weight, f₀)`; equal signatures mean equal multisets.
    pub fn tag_signature(&self) -> Vec<(u64, u64)> {
        let mut s: Vec<(u64, u64)> = self.weight.iter().zip(&self.f0).map(|(w, f)| (w.to_bits(), f.to_bits())).collect();
        s.sort_unstable();
        s
    }
}

/// Quasi-random sampling of `f₀` with `n` points: shifted Halton points mapped
/// through radial inverse CDFs; weight = `f₀ × phase-volume Jacobian / n`.
/// Points with zero weight are dropped.
pub fn sample_ensemble(data: &InitialData, domain: &ConvexDomain, n: usize, seed: u64) -> Result<ParticleEnsemble, KineticError> {
    data.profile.validate(domain)?;
    if n == 0 {
        return Err(KineticError::InvalidProfile("particle count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: [f64; 6] = std::array::from_fn(|_| rng.gen::<f64>());
    let profile = &data.profile;
    let c = domain.center();

    enum XMap {
        Ball { center: Vec3, table: RadialTable },
        Star { t_in: f64, t_out: f64 },
        Box { lo: Vec3, hi: Vec3 },
    }
    enum VMap {
        Ball { table: RadialTable },
        Uniform { v_max: f64 },
        Cold,
        Box { lo: Vec3, hi: Vec3 },
    }
    let (xmap, vmap) = match profile {
        Profile::MaxwellianBump { center, x_radius, v_thermal, v_cut, .. } => {
            let r = *x_radius;
            let s = *v_thermal;
            (
                XMap::Ball { center: Vec3::from(*center), table: RadialTable::new(r, |q| (1.0 - q * q / (r * r)).max(0.0).powi(2)) },
                VMap::Ball { table: RadialTable::new(*v_cut, |q| maxwell_shape(q, s)) },
            )
        }
        Profile::RadialShell { inner, outer, v_max, .. } => (
            XMap::Star { t_in: *inner, t_out: *outer },
            if *v_max == 0.0 { VMap::Cold } else { VMap::Uniform { v_max: *v_max } },
        ),
        Profile::UniformBox { x_min, x_max, v_min, v_max, .. } => (
            XMap::Box { lo: Vec3::from(*x_min), hi: Vec3::from(*x_max) },
            VMap::Box { lo: Vec3::from(*v_min), hi: Vec3::from(*v_max) },
        ),
        Profile::Isotropic { v_max, .. } | Profile::OddNormal { v_max, .. } => {
            (XMap::Star { t_in: 0.0, t_out: 1.0 }, VMap::Uniform { v_max: *v_max })
        }
    };
    let cold_density = match profile {
        Profile::RadialShell { density, .. } => *density,
        _ => 0.0,
    };

    let mut ens = ParticleEnsemble::default();
    for i in 0..n {
        let u = halton_point(i as u64, &shift);
        let (x, jx) = match &xmap {
            XMap::Ball { center, table } => {
                let (r, dr) = table.map(u[0]);
                (center + r * radial_dir(u[1], u[2]), 4.0 * PI * r * r * dr)
            }
            XMap::Star { t_in, t_out } => {
                let dir = radial_dir(u[1], u[2]);
                let rho = domain.ray_exit(&c, &dir);
                let (a, b) = (t_in.powi(3), t_out.powi(3));
                let t = (a + u[0] * (b - a)).cbrt();
                // keep samples strictly inside
                (c + (t * rho).min(rho * (1.0 - 1e-12)) * dir, 4.0 * PI * rho.powi(3) * (b - a) / 3.0)
            }
            XMap::Box { lo, hi } => {
                let d = hi - lo;
                (lo + Vec3::new(u[0] * d.x, u[1] * d.y, u[2] * d.z), d.x * d.y * d.z)
            }
        };
        let (v, jv) = match &vmap {
            VMap::Ball { table } => {
                let (s, ds) = table.map(u[3]);
                (s * radial_dir(u[4], u[5]), 4.0 * PI * s * s * ds)
            }
            VMap::Uniform { v_max } => {
                let s = v_max * u[3].cbrt();
                (s * radial_dir(u[4], u[5]), 4.0 / 3.0 * PI * v_max.powi(3))
            }
            VMap::Cold => (Vec3::zeros(), 1.0),
            VMap::Box { lo, hi } => {
                let d = hi - lo;
                (lo + Vec3::new(u[3] * d.x, u[4] * d.y, u[5] * d.z), d.x * d.y * d.z)
            }
        };
        let f = if matches!(vmap, VMap::Cold) {
            // spatial density carried entirely by the position sample
            if Profile::star_coordinate(domain, &x).0 <= 1.0 { cold_density } else { 0.0 }
        } else {
            profile.value(domain, &x, &v)
        };
        let w = f * jx * jv / n as f64;
        if w > 0.0 && domain.contains(&x) {
            ens.x.push(x);
            ens.v.push(v);
            ens.weight.push(w);
            ens.f0.push(f);
        }
    }
    if ens.is_empty() {
        return Err(KineticError::EmptySupport);
    }
    ens.q0 = ens.max_speed();
    Ok(ens)
}

/// Cloud-in-cell deposition. Stencil weight landing on halo cells is folded
/// back to the interior cell assigned by the grid, so the deposited mass
/// equals the particle weight. `workers` private grids are merged in order.
pub fn deposit(ens: &ParticleEnsemble, grid: &Arc<CellGrid>, workers: usize) -> Result<DensityGrid, KineticError> {
    let n_unknowns = grid.n_unknowns();
    let inv_vol = 1.0 / grid.spec().cell_volume();
    let domain = grid.domain();
    let workers = workers.max(1);
    let chunk = ens.len().div_ceil(workers).max(1);
    let partial: Result<Vec<Vec<f64>>, KineticError> = (0..ens.len())
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|idx| {
            let mut acc = vec![0.0; n_unknowns];
            for &p in idx {
                let x = ens.x[p];
                let outside = || KineticError::ParticleOutside { index: p, point: [x.x, x.y, x.z] };
                if !domain.contains_closure(&x) {
                    return Err(outside());
                }
                let (cells, w) = grid.trilinear(&x).ok_or_else(outside)?;
                for c in 0..8 {
                    if w[c] == 0.0 {
                        continue;
                    }
                    let target = match grid.kind(cells[c]) {
                        CellKind::Interior => grid.unknown_of(cells[c]),
                        _ => grid.fold_target(cells[c]),
                    }
                    .ok_or_else(outside)?;
                    acc[target] += ens.weight[p] * w[c] * inv_vol;
                }
            }
            Ok(acc)
        })
        .collect();
    let partial = partial?;
    let mut values = vec![0.0; n_unknowns];
    for part in &partial {
        for (v, p) in values.iter_mut().zip(part) {
            *v += p;
        }
    }
    Ok(DensityGrid::from_values(grid, values))
}

/// One diagnostics row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub t: f64,
    /// Deposited `Σ ρ h³`.
    pub mass: f64,
    /// `Σ w |v|²`.
    pub kinetic_energy: f64,
    /// `∫|E|²`, as `−Σ φρ h³`.
    pub field_energy: f64,
    pub total_energy: f64,
    /// Running maximum of `|v|` over the support.
    #[serde(rename = "Q")]
    pub q: f64,
    pub rho_max: f64,
    pub rho_53: f64,
    pub hopf_margin: f64,
}

impl DiagnosticsRecord {
    pub const COLUMNS: [&'static str; 9] =
        ["t", "mass", "kinetic_energy", "field_energy", "total_energy", "Q", "rho_max", "rho_53", "hopf_margin"];

    pub fn values(&self) -> [f64; 9] {
        [self.t, self.mass, self.kinetic_energy, self.field_energy, self.total_energy, self.q, self.rho_max, self.rho_53, self.hopf_margin]
    }
}

/// Running maximum: `Q(t) = sup_{s ≤ t} max|v(s)|`.
pub fn q_tracker(max_speeds: &[f64]) -> Vec<f64> {
    let mut q: f64 = 0.0;
    max_speeds.iter().map(|s| {
        q = q.max(*s);
        q
    }).collect()
}

/// Time stepping parameters shared by the self-consistent and Picard drivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepParams {
    pub t_end: f64,
    pub dt: f64,
    pub tol: f64,
    pub workers: usize,
    /// Ceiling for `Q(t)`; `3Q(0) + 3·sup|φ(0)|^{1/2}` when absent.
    pub blowup_ceiling: Option<f64>,
}

impl StepParams {
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round().max(0.0) as usize
    }
}

/// Hopf margin over a thin band, reported rather than asserted (zero fields give ≤ 0).
fn margin(phi: &PotentialField) -> f64 {
    let d = phi.domain();
    let band = (0.05 * d.diameter()).min(0.5 * d.tube_width());
    match hopf_margin(phi, d, band, 256, 8) {
        Ok(h) => h.eps0,
        Err(FieldError::NonpositiveMargin(v)) => v,
        Err(_) => f64::NAN,
    }
}

fn record(t: f64, q: f64, ens: &ParticleEnsemble, rho: &DensityGrid, phi: &PotentialField) -> DiagnosticsRecord {
    let kinetic_energy = ens.kinetic_energy();
    let field_energy = phi.field_energy(rho);
    DiagnosticsRecord {
        t,
        mass: rho.total_mass(),
        kinetic_energy,
        field_energy,
        total_energy: kinetic_energy + field_energy,
        q,
        rho_max: rho.max(),
        rho_53: rho.lp_norm(5.0 / 3.0),
        hopf_margin: margin(phi),
    }
}

/// Per-run conservation summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConservationReport {
    pub particle_weight: f64,
    /// Largest `|mass(t) − Σw| / Σw`.
    pub max_mass_error: f64,
    /// Largest step-to-step relative change of the deposited mass.
    pub max_mass_step_drift: f64,
    /// Multiset of `(weight, f₀)` unchanged.
    pub weights_invariant: bool,
    pub all_weights_nonnegative: bool,
    /// `max_t |H(t) − H(0)| / |H(0)|`.
    pub energy_drift: f64,
    /// `max_t ρ_max / ((4π/3)‖f₀‖∞Q(t)³)`.
    pub density_bound_ratio: f64,
    pub q_initial: f64,
    pub q_final: f64,
    pub q_ceiling: f64,
    pub reflections: u64,
}

impl ConservationReport {
    pub fn density_bound_holds(&self) -> bool {
        !(self.density_bound_ratio > DENSITY_SLACK)
    }
}

pub struct RunOutput {
    pub records: Vec<DiagnosticsRecord>,
    pub report: ConservationReport,
    pub ensemble: ParticleEnsemble,
    pub rho: DensityGrid,
    pub phi: PotentialField,
}

/// Split velocity-Verlet push of every particle. With `end` the step is
/// complete; without it the closing half kick is left to [`closing_kick`] and
/// the per-particle closing durations are returned.
fn push(
    ens: &mut ParticleEnsemble,
    start: &PotentialField,
    end: Option<&PotentialField>,
    t: f64,
    dt: f64,
) -> Result<(u64, Vec<f64>), KineticError> {
    let domain = start.domain();
    let fields = StepFields { start, end: end.map(|e| e as &dyn ForceField) };
    let steps: Result<Vec<(u32, f64)>, DynamicsError> = ens
        .x
        .par_iter_mut()
        .zip(ens.v.par_iter_mut())
        .map(|(x, v)| {
            let (n, tail) = split_step(domain, &fields, x, v, t, dt, None)?;
            if let Some(end) = end {
                half_kick(end, x, v, tail)?;
            }
            Ok((n, tail))
        })
        .collect();
    let steps = steps?;
    let count = steps.iter().map(|&(c, _)| c as u64).sum();
    Ok((count, steps.into_iter().map(|(_, tail)| tail).collect()))
}

fn closing_kick(ens: &mut ParticleEnsemble, field: &PotentialField, tails: &[f64]) -> Result<(), KineticError> {
    ens.x
        .par_iter()
        .zip(ens.v.par_iter_mut())
        .zip(tails.par_iter())
        .try_for_each(|((x, v), tail)| half_kick(field, x, v, *tail))
        .map_err(KineticError::from)
}

fn density_ratio(rec: &DiagnosticsRecord, f_sup: f64) -> f64 {
    let bound = 4.0 / 3.0 * PI * f_sup * rec.q.powi(3);
    if rec.rho_max == 0.0 {
        0.0
    } else {
        rec.rho_max / bound
    }
}

fn default_ceiling(q0: f64, phi: &PotentialField) -> f64 {
    let sup_phi = phi.values().iter().map(|v| v.abs()).fold(0.0, f64::max);
    3.0 * q0 + 3.0 * sup_phi.sqrt()
}

struct Ledger {
    total_weight: f64,
    signature: Vec<(u64, u64)>,
    f_sup: f64,
    q: f64,
    ceiling: f64,
    prev_mass: f64,
    report: ConservationReport,
}

impl Ledger {
    fn new(ens: &ParticleEnsemble, f_sup: f64, ceiling: f64) -> Self {
        let total_weight = ens.total_weight();
        Ledger {
            total_weight,
            signature: ens.tag_signature(),
            f_sup,
            q: ens.max_speed(),
            ceiling,
            prev_mass: f64::NAN,
            report: ConservationReport {
                particle_weight: total_weight,
                max_mass_error: 0.0,
                max_mass_step_drift: 0.0,
                weights_invariant: true,
                all_weights_nonnegative: ens.weight.iter().all(|w| *w >= 0.0),
                energy_drift: 0.0,
                density_bound_ratio: 0.0,
                q_initial: ens.max_speed(),
                q_final: ens.max_speed(),
                q_ceiling: ceiling,
                reflections: 0,
            },
        }
    }

    /// Record a step; mass and blow-up are asserted, the rest is reported.
    fn observe(&mut self, rec: &DiagnosticsRecord, h0: f64) -> Result<(), KineticError> {
        let r = &mut self.report;
        if self.total_weight > 0.0 {
            let err = (rec.mass - self.total_weight).abs() / self.total_weight;
            r.max_mass_error = r.max_mass_error.max(err);
            if self.prev_mass.is_finite() {
                r.max_mass_step_drift = r.max_mass_step_drift.max((rec.mass - self.prev_mass).abs() / self.total_weight);
            }
            if err > MASS_TOL {
                return Err(KineticError::Invariant(format!("deposited mass off by {err:.3e} at t = {}", rec.t)));
            }
        }
        self.prev_mass = rec.mass;
        if h0 != 0.0 {
            r.energy_drift = r.energy_drift.max((rec.total_energy - h0).abs() / h0.abs());
        }
        if self.f_sup.is_finite() {
            r.density_bound_ratio = r.density_bound_ratio.max(density_ratio(rec, self.f_sup));
        }
        r.q_final = rec.q;
        if rec.q > self.ceiling {
            return Err(KineticError::BlowupSuspected { t: rec.t, q: rec.q, ceiling: self.ceiling });
        }
        Ok(())
    }

    fn finish(&mut self, ens: &ParticleEnsemble) -> ConservationReport {
        self.report.weights_invariant = ens.tag_signature() == self.signature;
        self.report.all_weights_nonnegative = ens.weight.iter().all(|w| *w >= 0.0);
        self.report
    }
}

/// Sample `f₀`, treating an empty support as an empty ensemble.
pub fn sample_or_empty(data: &InitialData, domain: &ConvexDomain, n: usize, seed: u64) -> Result<ParticleEnsemble, KineticError> {
    match sample_ensemble(data, domain, n, seed) {
        Err(KineticError::EmptySupport) => Ok(ParticleEnsemble::default()),
        other => other,
    }
}

/// Leapfrog loop for the nonlinear system: kick, drift with reflections,
/// deposit, solve, kick. One record per step including `t = 0`.
pub fn self_consistent_run(
    ens: ParticleEnsemble,
    f_sup: f64,
    grid: &Arc<CellGrid>,
    params: &StepParams,
) -> Result<RunOutput, KineticError> {
    let mut ens = ens;
    let mut rho = deposit(&ens, grid, params.workers)?;
    let mut phi = solve_poisson(&rho, params.tol, None)?;
    let ceiling = params.blowup_ceiling.unwrap_or_else(|| default_ceiling(ens.max_speed(), &phi));
    let mut ledger = Ledger::new(&ens, f_sup, ceiling);
    let first = record(0.0, ledger.q, &ens, &rho, &phi);
    let h0 = first.total_energy;
    ledger.observe(&first, h0)?;
    let mut records = vec![first];
    for k in 0..params.steps() {
        let t = k as f64 * params.dt;
        let (count, tails) = push(&mut ens, &phi, None, t, params.dt)?;
        ledger.report.reflections += count;
        rho = deposit(&ens, grid, params.workers)?;
        rho.time = t + params.dt;
        let next = solve_poisson(&rho, params.tol, Some(phi.values()))?;
        phi = next;
        closing_kick(&mut ens, &phi, &tails)?;
        ledger.q = ledger.q.max(ens.max_speed());
        let rec = record((k + 1) as f64 * params.dt, ledger.q, &ens, &rho, &phi);
        ledger.observe(&rec, h0)?;
        records.push(rec);
    }
    let report = ledger.finish(&ens);
    Ok(RunOutput { records, report, ensemble: ens, rho, phi })
}

/// One Picard iterate: its field-history distance to the previous one and its Q curve.
#[derive(Debug, Clone, Serialize)]
pub struct PicardIterate {
    pub index: usize,
    /// `max_k ‖Eⁿ(t_k) − Eⁿ⁻¹(t_k)‖ / ‖E⁰(0)‖`; absent for the zeroth iterate.
    pub delta: Option<f64>,
    /// `Qⁿ(t_k)`.
    pub q: Vec<f64>,
    /// Largest `|Eⁿ⁻¹|` over the frozen history used to push this iterate.
    pub max_frozen_field: f64,
    /// `Qⁿ(t) ≤ Q(0) + t·max|Eⁿ⁻¹|` at every recorded time.
    pub q_bound_holds: bool,
    pub records: Vec<DiagnosticsRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PicardSummary {
    pub times: Vec<f64>,
    pub iterates: Vec<PicardIterate>,
    pub converged: bool,
    pub tol: f64,
}

impl PicardSummary {
    pub fn deltas(&self) -> Vec<f64> {
        self.iterates.iter().filter_map(|i| i.delta).collect()
    }
}

/// Frozen-field iteration. Iterate 0 keeps `f = f₀`, so its field history is
/// the static field of `ρ₀`. Iterate `n` pushes the initial ensemble through
/// the history of iterate `n−1` and records its own deposited field at each
/// step. Stops once the relative field distance is at most `tol` or after `n_max` iterates.
pub fn picard_run(
    ens0: &ParticleEnsemble,
    grid: &Arc<CellGrid>,
    params: &StepParams,
    n_max: usize,
    tol: f64,
) -> Result<PicardSummary, KineticError> {
    let steps = params.steps();
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * params.dt).collect();
    let rho0 = deposit(ens0, grid, params.workers)?;
    let phi0 = solve_poisson(&rho0, params.tol, None)?;
    let e0 = phi0.field_l2();
    let q0 = ens0.max_speed();

    let rec0 = record(0.0, q0, ens0, &rho0, &phi0);
    let mut history: Vec<Vec<f64>> = vec![phi0.values().to_vec(); steps + 1];
    let mut iterates = vec![PicardIterate {
        index: 0,
        delta: None,
        q: vec![q0; steps + 1],
        max_frozen_field: 0.0,
        q_bound_holds: true,
        records: times.iter().map(|&t| DiagnosticsRecord { t, ..rec0 }).collect(),
    }];
    let mut converged = false;
    for n in 1..=n_max {
        let mut ens = ens0.clone();
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
        next.push(phi0.values().to_vec());
        let mut start = PotentialField::from_values(grid, history[0].clone());
        let mut max_frozen = start.max_field_magnitude();
        let mut q = q0;
        let mut qs = vec![q0];
        let mut records = vec![rec0];
        let mut delta: f64 = if e0 > 0.0 { 0.0 } else { f64::NAN };
        let mut bound_ok = true;
        let mut phi_prev_own = phi0.clone();
        for k in 0..steps {
            let end = PotentialField::from_values(grid, history[k + 1].clone());
            max_frozen = max_frozen.max(end.max_field_magnitude());
            push(&mut ens, &start, Some(&end), times[k], params.dt)?;
            let mut rho = deposit(&ens, grid, params.workers)?;
            rho.time = times[k + 1];
            let own = solve_poisson(&rho, params.tol, Some(phi_prev_own.values()))?;
            q = q.max(ens.max_speed());
            qs.push(q);
            if q > q0 + times[k + 1] * max_frozen * (1.0 + 1e-9) + 1e-12 {
                bound_ok = false;
            }
            if e0 > 0.0 {
                delta = delta.max(own.field_l2_difference(&end) / e0);
            }
            records.push(record(times[k + 1], q, &ens, &rho, &own));
            next.push(own.values().to_vec());
            phi_prev_own = own;
            start = end;
        }
        if !(e0 > 0.0) {
            // zero initial field: the iteration is at its fixed point
            delta = 0.0;
        }
        iterates.push(PicardIterate { index: n, delta: Some(delta), q: qs, max_frozen_field: max_frozen, q_bound_holds: bound_ok, records });
        history = next;
        if delta <= tol {
            converged = true;
            break;
        }
    }
    Ok(PicardSummary { times, iterates, converged, tol })
}

/// Worst violation found for one initial-data condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub worst: f64,
    pub x: [f64; 3],
    pub v: [f64; 3],
    pub passed: bool,
}

impl ConditionCheck {
    fn new() -> Self {
        ConditionCheck { worst: 0.0, x: [0.0; 3], v: [0.0; 3], passed: true }
    }

    fn update(&mut self, value: f64, x: &Vec3, v: &Vec3) {
        if value.abs() > self.worst {
            self.worst = value.abs();
            self.x = [x.x, x.y, x.z];
            self.v = [v.x, v.y, v.z];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidationReport {
    /// `f₀(x, v) = f₀(x, v*)` at the wall.
    pub reflection_symmetry: ConditionCheck,
    /// `v⊥[∇⊥ₓf₀(x,v*) + ∇⊥ₓf₀(x,v)] + 2E⊥(0,x)∇⊥ᵥf₀(x,v) = 0` at the wall.
    pub normal_gradient: ConditionCheck,
    /// `f₀ = c₀` on `x⊥ + v⊥² ≤ δ₀`.
    pub flatness: ConditionCheck,
    pub delta0: f64,
    pub flat_value: f64,
    pub x_support: f64,
    pub v_support: f64,
    pub passed: bool,
}

/// Velocity probes use speeds up to this fraction of the velocity support.
pub const PROBE_FRACTION: f64 = 0.9;

/// Check the wall compatibility and flatness conditions on sampled points.
/// The field `E(0,·)` is solved on `grid` from the exact spatial density of `f₀`.
pub fn validate_initial(data: &InitialData, grid: &Arc<CellGrid>, tol: f64) -> Result<ValidationReport, KineticError> {
    let domain = grid.domain();
    let profile = &data.profile;
    profile.validate(domain)?;
    let rho = DensityGrid::from_fn(grid, |x| profile.spatial_density(domain, x));
    let phi = solve_poisson(&rho, tol, None)?;
    let f = |x: &Vec3, v: &Vec3| profile.value(domain, x, v);
    let v_probe = PROBE_FRACTION * profile.v_support();
    let tol_abs = 1e-9 * profile.sup().clamp(1e-300, 1e300);
    let eps_x = 1e-5 * domain.diameter();
    let eps_v = 1e-5 * v_probe.max(1e-300);
    let delta0 = data.delta0(domain);

    let boundary = domain.boundary_samples(200);
    let dirs = fibonacci_directions(24);
    let speeds = [0.25, 0.5, 0.75, 1.0].map(|s| s * v_probe);

    let mut sym = ConditionCheck::new();
    let mut grad = ConditionCheck::new();
    for p in &boundary {
        let frame = domain.frame_curvatures(p)?;
        let n = frame.normal;
        let e = phi.field(p)?;
        let mut velocities: Vec<Vec3> = vec![v_probe * n, -v_probe * n];
        for d in &dirs {
            for s in speeds {
                velocities.push(s * d);
            }
        }
        for v in &velocities {
            let vs = v - 2.0 * v.dot(&n) * n;
            sym.update(f(p, v) - f(p, &vs), p, v);
            // normal derivatives, ∂/∂x⊥ = −n·∇ₓ (one-sided, inward) and ∂/∂v⊥ = −n·∇ᵥ
            let dx = |w: &Vec3| {
                (-3.0 * f(p, w) + 4.0 * f(&(p - eps_x * n), w) - f(&(p - 2.0 * eps_x * n), w)) / (2.0 * eps_x)
            };
            let dv = (f(p, &(v - eps_v * n)) - f(p, &(v + eps_v * n))) / (2.0 * eps_v);
            let lp = crate::geometry::LocalPhase { mu: frame.mu, x_perp: 0.0, w: [v.dot(&frame.u[0]), v.dot(&frame.u[1])], v_perp: -v.dot(&n) };
            let e_perp = decompose(&e, &frame, &lp)?.e_perp;
            grad.update(lp.v_perp * (dx(&vs) + dx(v)) + 2.0 * e_perp * dv, p, v);
        }
    }

    // flatness band
    let c0 = data.flat_value.unwrap_or_else(|| f(&boundary[0], &Vec3::zeros()));
    let mut flat = ConditionCheck::new();
    for (i, p) in boundary.iter().enumerate() {
        let frame = domain.frame_curvatures(p)?;
        for j in 0..6 {
            let xp = delta0 * j as f64 / 6.0;
            let x = p - xp * frame.normal;
            let vmax_perp = (delta0 - xp).max(0.0).sqrt().min(v_probe);
            for (m, d) in dirs.iter().enumerate().take(8) {
                let tang = d - d.dot(&frame.normal) * frame.normal;
                let tang = if tang.norm() > 0.0 { tang.normalize() } else { frame.u[0] };
                let frac = ((i + m) % 5) as f64 / 4.0;
                for sign in [-1.0, 1.0] {
                    let v = frac * v_probe * tang - sign * frac * vmax_perp * frame.normal;
                    flat.update(f(&x, &v) - c0, &x, &v);
                }
            }
        }
    }
    sym.passed = sym.worst <= tol_abs;
    let grad_scale = profile.sup().min(1e300) * (v_probe / domain.diameter() + phi.max_field_magnitude() / v_probe.max(1e-300));
    grad.passed = grad.worst <= 1e-6 * grad_scale.max(1e-300);
    flat.passed = flat.worst <= tol_abs;
    Ok(ValidationReport {
        passed: sym.passed && grad.passed && flat.passed,
        reflection_symmetry: sym,
        normal_gradient: grad,
        flatness: flat,
        delta0,
        flat_value: c0,
        x_support: profile.x_support(domain),
        v_support: profile.v_support(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ball() -> ConvexDomain {
        ConvexDomain::ball(1.0).unwrap()
    }

    fn bump() -> Profile {
        Profile::MaxwellianBump { amplitude: 4.0, center: [0.0; 3], x_radius: 0.7, v_thermal: 0.25, v_cut: 1.0 }
    }

    #[test]
    fn halton_is_deterministic_and_in_range() {
        let s = [0.3; 6];
        for i in 0..100 {
            let p = halton_point(i, &s);
            assert!(p.iter().all(|u| (0.0..1.0).contains(u)));
            assert_eq!(p, halton_point(i, &s));
        }
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(3, 2), 0.75);
    }

    #[test]
    fn radial_table_uniform_ball() {
        let t = RadialTable::new(2.0, |_| 1.0);
        let (r, dr) = t.map(0.125);
        assert_relative_eq!(r, 1.0, epsilon = 1e-6);
        // r = 2 u^{1/3}: dr/du = (2/3) u^{-2/3}
        assert_relative_eq!(dr, 2.0 / 3.0 * 0.125f64.powf(-2.0 / 3.0), max_relative = 1e-3);
    }

    #[test]
    fn empty_support() {
        let p = Profile::Isotropic { value: 0.0, v_max: 1.0 };
        assert_eq!(sample_ensemble(&InitialData::new(p), &ball(), 100, 1).unwrap_err(), KineticError::EmptySupport);
    }

    #[test]
    fn uniform_box_total_weight_is_exact() {
        let p = Profile::UniformBox { value: 2.0, x_min: [-0.3, -0.2, -0.1], x_max: [0.3, 0.2, 0.4], v_min: [-1.0; 3], v_max: [1.0, 0.5, 1.0] };
        let e = sample_ensemble(&InitialData::new(p.clone()), &ball(), 1000, 7).unwrap();
        assert_relative_eq!(e.total_weight(), p.exact_mass(&ball()), max_relative = 1e-12);
        assert_relative_eq!(p.exact_mass(&ball()), 2.0 * 0.6 * 0.4 * 0.5 * 2.0 * 1.5 * 2.0, max_relative = 1e-14);
    }

    #[test]
    fn bump_weight_matches_quadrature() {
        let d = ball();
        let e = sample_ensemble(&InitialData::new(bump()), &d, 20_000, 3).unwrap();
        let exact = bump().exact_mass(&d);
        assert!((e.total_weight() / exact - 1.0).abs() < 1e-3);
        assert!(e.q0 <= 1.0);
        // the same seed reproduces the same ensemble
        let again = sample_ensemble(&InitialData::new(bump()), &d, 20_000, 3).unwrap();
        assert_eq!(e.tag_signature(), again.tag_signature());
    }

    #[test]
    fn maxwellian_velocity_integral() {
        // ∫_{|v|≤∞} e^{−v²/2σ²} = (2πσ²)^{3/2}; a cut at 8σ changes nothing visible
        let s: f64 = 0.3;
        assert_relative_eq!(radial_integral(8.0 * s, |q| maxwell_shape(q, s)), (2.0 * PI * s * s).powf(1.5), max_relative = 1e-12);
    }

    #[test]
    fn single_particle_deposit() {
        let d = ball();
        let g = CellGrid::new(&d, 1.0 / 16.0).unwrap();
        let u = 1234;
        let ens = ParticleEnsemble { x: vec![g.center_of_unknown(u)], v: vec![Vec3::zeros()], weight: vec![1.0], f0: vec![1.0], q0: 0.0 };
        let rho = deposit(&ens, &g, 1).unwrap();
        let h3 = g.spec().cell_volume();
        assert_relative_eq!(rho.values()[u], 1.0 / h3, max_relative = 1e-12);
        assert_relative_eq!(rho.total_mass(), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn wall_particles_keep_their_mass() {
        let d = ball();
        let g = CellGrid::new(&d, 1.0 / 16.0).unwrap();
        let pts = d.boundary_samples(500);
        let n = pts.len();
        let ens = ParticleEnsemble { x: pts, v: vec![Vec3::zeros(); n], weight: vec![0.5; n], f0: vec![1.0; n], q0: 0.0 };
        let rho = deposit(&ens, &g, 3).unwrap();
        assert_relative_eq!(rho.total_mass(), 0.5 * n as f64, max_relative = 1e-12);
        assert!(rho.values().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn outside_particle_rejected() {
        let d = ball();
        let g = CellGrid::new(&d, 1.0 / 16.0).unwrap();
        let ens = ParticleEnsemble { x: vec![Vec3::new(1.1, 0.0, 0.0)], v: vec![Vec3::zeros()], weight: vec![1.0], f0: vec![1.0], q0: 0.0 };
        assert!(matches!(deposit(&ens, &g, 1), Err(KineticError::ParticleOutside { index: 0, .. })));
    }

    #[test]
    fn q_tracker_is_running_max() {
        assert_eq!(q_tracker(&[0.5, 0.3, 0.7, 0.6]), vec![0.5, 0.5, 0.7, 0.7]);
        assert_eq!(q_tracker(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_data_run_is_zero() {
        let d = ball();
        let g = CellGrid::new(&d, 1.0 / 16.0).unwrap();
        let data = InitialData::new(Profile::Isotropic { value: 0.0, v_max: 1.0 });
        let ens = sample_or_empty(&data, &d, 100, 1).unwrap();
        let params = StepParams { t_end: 0.01, dt: 1e-3, tol: 1e-10, workers: 1, blowup_ceiling: None };
        let out = self_consistent_run(ens, 0.0, &g, &params).unwrap();
        assert_eq!(out.records.len(), 11);
        for r in &out.records {
            assert_eq!([r.mass, r.kinetic_energy, r.field_energy, r.total_energy, r.q, r.rho_max, r.rho_53], [0.0; 7]);
        }
        let pic = picard_run(&ParticleEnsemble::default(), &g, &params, 5, 1e-3).unwrap();
        assert!(pic.converged);
        assert_eq!(pic.iterates.len(), 2);
    }

    #[test]
    fn even_profile_passes_validation() {
        let d = ball();
        let g = CellGrid::new(&d, 1.0 / 16.0).unwrap();
        let r = validate_initial(&InitialData::new(Profile::Isotropic { value: 0.5, v_max: 1.0 }), &g, 1e-10).unwrap();
        assert_eq!(r.reflection_symmetry.worst, 0.0);
        assert_eq!(r.normal_gradient.worst, 0.0);
        assert!(r.passed);
        let r = validate_initial(&InitialData::new(bump()), &g, 1e-10).unwrap();
        assert!(r.passed);
        assert_eq!(r.flat_value, 0.0);
    }

    #[test]
    fn odd_profile_violation_matches_direct_evaluation() {
        let d = ball();
        let g = CellGrid::new(&d, 1.0 / 16.0).unwrap();
        let p = Profile::OddNormal { value: 0.5, v_max: 1.0, skew: 0.4 };
        let r = validate_initial(&InitialData::new(p.clone()), &g, 1e-10).unwrap();
        assert!(!r.reflection_symmetry.passed);
        let x = Vec3::from(r.reflection_symmetry.x);
        let v = Vec3::from(r.reflection_symmetry.v);
        let n = x.normalize();
        let direct = (p.value(&d, &x, &v) - p.value(&d, &x, &(v - 2.0 * v.dot(&n) * n))).abs();
        assert_relative_eq!(r.reflection_symmetry.worst, direct, max_relative = 1e-12);
        assert_relative_eq!(direct, 2.0 * 0.5 * 0.4 * (PROBE_FRACTION * 1.0f64).tanh(), max_relative = 1e-9);
    }
}
