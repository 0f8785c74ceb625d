//! Characteristics `dX/ds = V`, `dV/ds = E(X)` with specular reflection at the
//! wall, the boundary-adapted form of the same system, and the Lyapunov
//! diagnostics used near grazing trajectories.

use serde::Serialize;
use thiserror::Error;

use crate::field::{decompose, FieldError, ForceField, LocalFieldSample};
use crate::geometry::{arr, BoundaryFrame, ConvexDomain, GeometryError, LocalPhase, Vec3};

/// Reflections allowed within one step before giving up.
pub const MAX_REFLECTIONS_PER_STEP: u32 = 64;
/// Cap on bisection iterations when locating a wall crossing.
pub const MAX_BISECTION: usize = 60;
/// Below this `|V·n|/|V|` an impact is flagged as grazing.
pub const GRAZING_FLAG: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("more than {MAX_REFLECTIONS_PER_STEP} reflections within one step at s = {time}")]
    StuckAtBoundary { time: f64 },
    #[error("field evaluation failed: {0}")]
    FieldEvalFailure(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("trajectory left the tubular band at s = {time}")]
    BandExit { time: f64 },
    #[error("step must be positive, got {0}")]
    NonpositiveStep(f64),
    #[error("state {0:?} is outside the domain")]
    OutsideDomain([f64; 3]),
}

/// One characteristic `(X, V)` at time `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseState {
    pub x: Vec3,
    pub v: Vec3,
    pub s: f64,
    pub reflections: u32,
    /// Boundary coordinates, filled by [`PhaseState::refresh_local`] inside the band.
    pub local: Option<LocalPhase>,
    pub alpha: Option<f64>,
}

impl PhaseState {
    pub fn new(x: Vec3, v: Vec3) -> Self {
        PhaseState { x, v, s: 0.0, reflections: 0, local: None, alpha: None }
    }

    /// Recompute the cached local coordinates and `α`. Outside the band both are cleared.
    pub fn refresh_local(&mut self, domain: &ConvexDomain, field: &dyn ForceField) -> Result<(), DynamicsError> {
        match domain.to_local(&self.x, &self.v) {
            Ok((lp, frame)) => {
                let phi = field.potential(&self.x)?;
                self.alpha = Some(lyapunov_alpha(&lp, phi, &frame)?);
                self.local = Some(lp);
            }
            Err(GeometryError::AmbiguousProjection { .. }) => {
                self.local = None;
                self.alpha = None;
            }
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReflectionEvent {
    pub time: f64,
    pub point: [f64; 3],
    pub v_in: [f64; 3],
    pub v_out: [f64; 3],
    pub normal: [f64; 3],
    /// `|V⁻·n| / |V⁻|`.
    pub grazing: f64,
}

impl ReflectionEvent {
    pub fn is_grazing(&self) -> bool {
        self.grazing < GRAZING_FLAG
    }
}

/// `v − 2(v·n)n`.
#[inline]
pub fn specular_reflect(v: &Vec3, n: &Vec3) -> Vec3 {
    v - 2.0 * v.dot(n) * n
}

/// `v += τ/2 · E(x)`.
#[inline]
pub fn half_kick(field: &dyn ForceField, x: &Vec3, v: &mut Vec3, dt: f64) -> Result<(), FieldError> {
    *v += 0.5 * dt * field.field(x)?;
    Ok(())
}

/// Free flight for `dt` with specular reflections. Each crossing of the wall
/// is bracketed by the provisional endpoint and bisected on `Φ` until
/// `|Φ| ≤ 1e−12·L`; the inside end of the bracket is the impact point.
/// Returns the number of reflections.
pub fn drift(
    domain: &ConvexDomain,
    x: &mut Vec3,
    v: &mut Vec3,
    s0: f64,
    dt: f64,
    mut events: Option<&mut Vec<ReflectionEvent>>,
) -> Result<u32, DynamicsError> {
    let tol = domain.boundary_tol();
    let mut rem = dt;
    let mut s = s0;
    let mut count = 0;
    loop {
        let end = *x + rem * *v;
        if domain.phi(&end) <= 0.0 {
            *x = end;
            return Ok(count);
        }
        let (mut lo, mut hi) = (0.0, rem);
        for _ in 0..MAX_BISECTION {
            let mid = 0.5 * (lo + hi);
            let p = domain.phi(&(*x + mid * *v));
            if p <= 0.0 {
                lo = mid;
                if p >= -tol {
                    break;
                }
            } else {
                hi = mid;
            }
        }
        let xw = *x + lo * *v;
        let n = domain.gradient(&xw).normalize();
        let v_in = *v;
        *v = specular_reflect(&v_in, &n);
        count += 1;
        s += lo;
        if let Some(ev) = events.as_deref_mut() {
            let speed = v_in.norm();
            ev.push(ReflectionEvent {
                time: s,
                point: arr(&xw),
                v_in: arr(&v_in),
                v_out: arr(v),
                normal: arr(&n),
                grazing: if speed > 0.0 { v_in.dot(&n).abs() / speed } else { 0.0 },
            });
        }
        if count > MAX_REFLECTIONS_PER_STEP {
            return Err(DynamicsError::StuckAtBoundary { time: s });
        }
        *x = xw;
        rem -= lo;
    }
}

/// Field over one step: `start` at its beginning, `end` (when known) at its end,
/// linear in time between them.
#[derive(Clone, Copy)]
pub struct StepFields<'a> {
    pub start: &'a dyn ForceField,
    pub end: Option<&'a dyn ForceField>,
}

impl StepFields<'_> {
    /// `E` at fraction `theta` of the step; the start field while `end` is unknown.
    pub fn at(&self, theta: f64, x: &Vec3) -> Result<Vec3, FieldError> {
        let e0 = self.start.field(x)?;
        match self.end {
            Some(end) if theta > 0.0 => Ok((1.0 - theta) * e0 + theta * end.field(x)?),
            _ => Ok(e0),
        }
    }
}

/// Reflections inside one step after which the remainder is finished with a
/// straight drift (a grazing orbit under an outward force hops ever shorter).
pub const SPLIT_REFLECTIONS: u32 = 8;

/// Velocity-Verlet step split at every wall impact. A provisional sub-step over
/// the remaining time is tried; if it ends outside, the impact time is bisected
/// on `Φ` along the sub-step path `x + s·v + s²/2·E`, the sub-step is completed
/// at the wall, `V` is reflected and the integrator restarts for the rest of the
/// step. Everything except the closing half kick is applied; its duration is
/// returned together with the reflection count.
pub fn split_step(
    domain: &ConvexDomain,
    fields: &StepFields,
    x: &mut Vec3,
    v: &mut Vec3,
    s0: f64,
    dt: f64,
    mut events: Option<&mut Vec<ReflectionEvent>>,
) -> Result<(u32, f64), DynamicsError> {
    let tol = domain.boundary_tol();
    let mut done = 0.0;
    let mut count = 0;
    loop {
        let rem = dt - done;
        let e0 = fields.at(done / dt, x)?;
        if count >= SPLIT_REFLECTIONS {
            *v += 0.5 * rem * e0;
            count += drift(domain, x, v, s0 + done, rem, events)?;
            return Ok((count, rem));
        }
        let (x0, v0) = (*x, *v);
        let path = |s: f64| x0 + s * v0 + 0.5 * s * s * e0;
        if domain.phi(&path(rem)) <= 0.0 {
            *x = path(rem);
            *v += 0.5 * rem * e0;
            return Ok((count, rem));
        }
        let (mut lo, mut hi) = (0.0, rem);
        for _ in 0..MAX_BISECTION {
            let mid = 0.5 * (lo + hi);
            let p = domain.phi(&path(mid));
            if p <= 0.0 {
                lo = mid;
                if p >= -tol {
                    break;
                }
            } else {
                hi = mid;
            }
        }
        let xw = path(lo);
        done += lo;
        let v_in = *v + 0.5 * lo * (e0 + fields.at(done / dt, &xw)?);
        let n = domain.gradient(&xw).normalize();
        *v = specular_reflect(&v_in, &n);
        *x = xw;
        count += 1;
        if let Some(ev) = events.as_deref_mut() {
            let speed = v_in.norm();
            ev.push(ReflectionEvent {
                time: s0 + done,
                point: arr(&xw),
                v_in: arr(&v_in),
                v_out: arr(v),
                normal: arr(&n),
                grazing: if speed > 0.0 { v_in.dot(&n).abs() / speed } else { 0.0 },
            });
        }
    }
}

/// One velocity-Verlet step in a static field, split at wall impacts.
pub fn advance(
    state: &PhaseState,
    field: &dyn ForceField,
    domain: &ConvexDomain,
    dt: f64,
    events: Option<&mut Vec<ReflectionEvent>>,
) -> Result<PhaseState, DynamicsError> {
    advance_between(state, field, field, domain, dt, events)
}

/// Velocity-Verlet step in a field sampled at the two step times (`start`, `end`)
/// and interpolated linearly in between.
pub fn advance_between(
    state: &PhaseState,
    start: &dyn ForceField,
    end: &dyn ForceField,
    domain: &ConvexDomain,
    dt: f64,
    events: Option<&mut Vec<ReflectionEvent>>,
) -> Result<PhaseState, DynamicsError> {
    if !(dt > 0.0) {
        return Err(DynamicsError::NonpositiveStep(dt));
    }
    if !domain.contains_closure(&state.x) {
        return Err(DynamicsError::OutsideDomain(arr(&state.x)));
    }
    let mut x = state.x;
    let mut v = state.v;
    let fields = StepFields { start, end: Some(end) };
    let (n, tail) = split_step(domain, &fields, &mut x, &mut v, state.s, dt, events)?;
    half_kick(end, &x, &mut v, tail)?;
    Ok(PhaseState { x, v, s: state.s + dt, reflections: state.reflections + n, local: None, alpha: None })
}

/// Time derivatives of `(μ₁, μ₂, x⊥, w₁, w₂, v⊥)`. The `μ` rates refer to the
/// Monge chart at the foot point, in which the frame's Christoffel symbols are given.
pub fn local_rhs(lp: &LocalPhase, sample: &LocalFieldSample, frame: &BoundaryFrame) -> Result<[f64; 6], GeometryError> {
    let m = frame.check_metric(lp.x_perp)?;
    Ok([lp.w[0] / m[0], lp.w[1] / m[1], lp.v_perp, sample.sigma[0], sample.sigma[1], sample.normal_force])
}

/// `α = v⊥²/2 − φ − (Σ wᵢ² bᵢ / (1 − kᵢ x⊥)) x⊥`.
pub fn lyapunov_alpha(lp: &LocalPhase, phi: f64, frame: &BoundaryFrame) -> Result<f64, GeometryError> {
    let m = frame.check_metric(lp.x_perp)?;
    let curv: f64 = (0..2).map(|i| lp.w[i] * lp.w[i] * frame.b[i] / m[i]).sum();
    Ok(0.5 * lp.v_perp * lp.v_perp - phi - curv * lp.x_perp)
}

/// Recorded trajectory of a single characteristic.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub states: Vec<PhaseState>,
    pub events: Vec<ReflectionEvent>,
    /// Step size used.
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopRule {
    Steps(usize),
    /// Stop once this many reflections happened, or after the step budget.
    Reflections { count: u32, max_steps: usize },
}

/// Integrate in a static field, recording every step and refreshing local data.
pub fn integrate(
    start: PhaseState,
    field: &dyn ForceField,
    domain: &ConvexDomain,
    dt: f64,
    stop: StopRule,
) -> Result<Trajectory, DynamicsError> {
    let mut traj = Trajectory { dt, ..Default::default() };
    let mut state = start;
    state.refresh_local(domain, field)?;
    traj.states.push(state);
    let max_steps = match stop {
        StopRule::Steps(n) => n,
        StopRule::Reflections { max_steps, .. } => max_steps,
    };
    for _ in 0..max_steps {
        state = advance(&state, field, domain, dt, Some(&mut traj.events))?;
        state.refresh_local(domain, field)?;
        traj.states.push(state);
        if let StopRule::Reflections { count, .. } = stop {
            if state.reflections >= count {
                break;
            }
        }
    }
    Ok(traj)
}

/// Extremes of `α` and of `x⊥ + v⊥²` along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VelocityLemmaReport {
    pub min_alpha: f64,
    pub max_alpha: f64,
    pub alpha_ratio: f64,
    pub min_distance: f64,
    pub max_distance: f64,
    /// `max/min` of `x⊥ + v⊥²`.
    pub distance_ratio: f64,
    /// Samples used; all of them unless the trajectory left the band.
    pub samples: usize,
    pub band_exit: bool,
}

/// Velocity-Lemma extremes over the in-band prefix of a trajectory.
pub fn velocity_lemma_ratio(traj: &Trajectory) -> VelocityLemmaReport {
    let mut r = VelocityLemmaReport {
        min_alpha: f64::INFINITY,
        max_alpha: 0.0,
        alpha_ratio: f64::NAN,
        min_distance: f64::INFINITY,
        max_distance: 0.0,
        distance_ratio: f64::NAN,
        samples: 0,
        band_exit: false,
    };
    for st in &traj.states {
        let (Some(lp), Some(alpha)) = (st.local, st.alpha) else {
            r.band_exit = true;
            break;
        };
        let d = lp.x_perp + lp.v_perp * lp.v_perp;
        r.min_alpha = r.min_alpha.min(alpha);
        r.max_alpha = r.max_alpha.max(alpha);
        r.min_distance = r.min_distance.min(d);
        r.max_distance = r.max_distance.max(d);
        r.samples += 1;
    }
    if r.samples > 0 {
        r.alpha_ratio = r.max_alpha / r.min_alpha;
        r.distance_ratio = r.max_distance / r.min_distance;
    }
    r
}

/// `max |dα/dt| / (α(1 + |log α|))` with `dα/dt` from central differences
/// over the in-band prefix of a trajectory. `α` has a kink at each reflection
/// (`v⊥` flips), so stencils that straddle one are skipped.
pub fn dalpha_dt_check(traj: &Trajectory) -> Result<f64, DynamicsError> {
    let alphas: Vec<f64> = traj.states.iter().map_while(|s| s.alpha).collect();
    if alphas.len() < 3 {
        let time = traj.states.get(alphas.len()).map_or(0.0, |s| s.s);
        return Err(DynamicsError::BandExit { time });
    }
    let mut worst: f64 = 0.0;
    for i in 1..alphas.len() - 1 {
        let a = alphas[i];
        if !(a > 0.0) || traj.states[i + 1].reflections != traj.states[i - 1].reflections {
            continue;
        }
        let da = (alphas[i + 1] - alphas[i - 1]) / (2.0 * traj.dt);
        worst = worst.max(da.abs() / (a * (1.0 + a.ln().abs())));
    }
    Ok(worst)
}

/// Trajectory integrated directly in boundary coordinates with classical RK4.
///
/// The state is kept in ambient form: foot point `x∥`, `x⊥`, tangential velocity
/// `v∥ = Σ wᵢuᵢ` and `v⊥`. Each stage rebuilds the frame at the (re-projected)
/// foot point and applies [`local_rhs`]: `ẋ∥ = Σ μ̇ᵢuᵢ`,
/// `v̇∥ = Σ σᵢuᵢ − (Σ kᵢwᵢμ̇ᵢ) n`.
pub struct LocalIntegrator<'a> {
    pub domain: &'a ConvexDomain,
    pub field: &'a dyn ForceField,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalState {
    pub foot: Vec3,
    pub x_perp: f64,
    pub v_par: Vec3,
    pub v_perp: f64,
}

impl LocalIntegrator<'_> {
    pub fn from_cartesian(&self, x: &Vec3, v: &Vec3) -> Result<LocalState, DynamicsError> {
        let (lp, frame) = self.domain.to_local(x, v)?;
        Ok(LocalState {
            foot: frame.point,
            x_perp: lp.x_perp,
            v_par: lp.w[0] * frame.u[0] + lp.w[1] * frame.u[1],
            v_perp: lp.v_perp,
        })
    }

    pub fn to_cartesian(&self, st: &LocalState) -> Result<(Vec3, Vec3), DynamicsError> {
        let frame = self.frame_at(&st.foot)?;
        let x = frame.point - st.x_perp * frame.normal;
        let v = st.v_par - st.v_par.dot(&frame.normal) * frame.normal - st.v_perp * frame.normal;
        Ok((x, v))
    }

    fn frame_at(&self, foot: &Vec3) -> Result<BoundaryFrame, DynamicsError> {
        let p = self.domain.closest_boundary_point(foot)?;
        Ok(self.domain.frame_curvatures(&p)?)
    }

    fn rhs(&self, st: &LocalState) -> Result<LocalState, DynamicsError> {
        let mut frame = self.frame_at(&st.foot)?;
        frame.x_perp = st.x_perp;
        let w = [st.v_par.dot(&frame.u[0]), st.v_par.dot(&frame.u[1])];
        let lp = LocalPhase { mu: frame.mu, x_perp: st.x_perp, w, v_perp: st.v_perp };
        let x = frame.interior_point();
        let e = self.field.field(&x)?;
        let sample = decompose(&e, &frame, &lp)?;
        let d = local_rhs(&lp, &sample, &frame)?;
        let turn = frame.k[0] * w[0] * d[0] + frame.k[1] * w[1] * d[1];
        Ok(LocalState {
            foot: d[0] * frame.u[0] + d[1] * frame.u[1],
            x_perp: d[2],
            v_par: d[3] * frame.u[0] + d[4] * frame.u[1] - turn * frame.normal,
            v_perp: d[5],
        })
    }

    pub fn step(&self, st: &LocalState, dt: f64) -> Result<LocalState, DynamicsError> {
        let add = |a: &LocalState, k: &LocalState, c: f64| LocalState {
            foot: a.foot + c * k.foot,
            x_perp: a.x_perp + c * k.x_perp,
            v_par: a.v_par + c * k.v_par,
            v_perp: a.v_perp + c * k.v_perp,
        };
        let k1 = self.rhs(st)?;
        let k2 = self.rhs(&add(st, &k1, 0.5 * dt))?;
        let k3 = self.rhs(&add(st, &k2, 0.5 * dt))?;
        let k4 = self.rhs(&add(st, &k3, dt))?;
        let mut out = *st;
        for (k, c) in [(&k1, 1.0), (&k2, 2.0), (&k3, 2.0), (&k4, 1.0)] {
            out = add(&out, k, c * dt / 6.0);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{UniformBallField, ZeroField};
    use approx::assert_relative_eq;

    fn ball() -> ConvexDomain {
        ConvexDomain::ball(1.0).unwrap()
    }

    #[test]
    fn reflect_examples() {
        assert_eq!(specular_reflect(&Vec3::new(-1.0, 0.0, 0.0), &Vec3::new(-1.0, 0.0, 0.0)), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(specular_reflect(&Vec3::new(1.0, 2.0, 3.0), &Vec3::z()), Vec3::new(1.0, 2.0, -3.0));
        assert_eq!(specular_reflect(&Vec3::new(1.0, 2.0, 0.0), &Vec3::z()), Vec3::new(1.0, 2.0, 0.0));
    }

    #[test]
    fn billiard_chord() {
        let d = ball();
        let mut st = PhaseState::new(Vec3::zeros(), Vec3::x());
        let mut events = Vec::new();
        for _ in 0..2000 {
            st = advance(&st, &ZeroField, &d, 1e-3, Some(&mut events)).unwrap();
        }
        assert_eq!(events.len(), 1);
        assert_relative_eq!(events[0].time, 1.0, epsilon = 2.0 * d.boundary_tol());
        assert_relative_eq!(Vec3::from(events[0].point), Vec3::x(), epsilon = 2.0 * d.boundary_tol());
        assert!(d.phi(&Vec3::from(events[0].point)).abs() <= d.boundary_tol());
        assert_relative_eq!(st.x, Vec3::zeros(), epsilon = 1e-9);
        assert_relative_eq!(st.v.norm(), 1.0, epsilon = 1e-15);
        for _ in 0..1000 {
            st = advance(&st, &ZeroField, &d, 1e-3, None).unwrap();
        }
        assert_relative_eq!(st.x, -Vec3::x(), epsilon = 1e-9);
    }

    #[test]
    fn free_fall_rhs() {
        let d = ball();
        let (lp, frame) = d.to_local(&Vec3::new(0.7, 0.0, 0.0), &Vec3::new(-0.3, 0.0, 0.0)).unwrap();
        let s = decompose(&Vec3::zeros(), &frame, &lp).unwrap();
        assert_eq!(local_rhs(&lp, &s, &frame).unwrap(), [0.0, 0.0, 0.3, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn centripetal_pull_at_wall() {
        let d = ball();
        let frame = d.frame_curvatures(&Vec3::x()).unwrap();
        let lp = LocalPhase { mu: frame.mu, x_perp: 0.0, w: [1.0, 0.0], v_perp: 0.0 };
        let s = decompose(&Vec3::zeros(), &frame, &lp).unwrap();
        let r = local_rhs(&lp, &s, &frame).unwrap();
        assert_relative_eq!(r[5], -1.0, epsilon = 1e-12);
        assert_relative_eq!(r[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn metric_degeneracy_is_an_error() {
        let d = ball();
        let frame = d.frame_curvatures(&Vec3::x()).unwrap();
        let lp = LocalPhase { mu: frame.mu, x_perp: 1.5, w: [0.0, 0.0], v_perp: 0.0 };
        assert!(matches!(lyapunov_alpha(&lp, 0.0, &frame), Err(GeometryError::FrameInvalid(_))));
    }

    #[test]
    fn alpha_examples() {
        let d = ball();
        let frame = d.frame_curvatures(&Vec3::x()).unwrap();
        let on_gamma = LocalPhase { mu: frame.mu, x_perp: 0.0, w: [0.3, 0.2], v_perp: 0.0 };
        assert_eq!(lyapunov_alpha(&on_gamma, 0.0, &frame).unwrap(), 0.0);
        let radial = LocalPhase { mu: frame.mu, x_perp: 0.2, w: [0.0, 0.0], v_perp: 0.4 };
        assert_relative_eq!(lyapunov_alpha(&radial, 0.0, &frame).unwrap(), 0.08, epsilon = 1e-15);

        // independent recomputation of each term for the uniform ball
        let x = Vec3::new(0.99, 0.0, 0.0);
        let (u, _) = crate::geometry::tangent_basis(&Vec3::x());
        let v = 0.5 * u - 0.1 * Vec3::x();
        let f = UniformBallField { density: 1.0, radius: 1.0, center: Vec3::zeros() };
        let (lp, frame) = d.to_local(&x, &v).unwrap();
        let alpha = lyapunov_alpha(&lp, f.potential(&x).unwrap(), &frame).unwrap();
        let expected = 0.5 * 0.1f64.powi(2) + (1.0 - 0.99f64.powi(2)) / 6.0 + 0.25 * (0.01 / 0.99);
        assert_relative_eq!(alpha, expected, max_relative = 1e-10);
        assert_relative_eq!(alpha, 0.0108, epsilon = 5e-5);
    }

    #[test]
    fn radial_alpha_is_stationary_in_static_field() {
        // w = 0 and E radial: α = v⊥²/2 − φ is the energy
        let d = ball();
        let f = UniformBallField { density: 1.0, radius: 1.0, center: Vec3::zeros() };
        let st = PhaseState::new(Vec3::new(0.0, 0.0, 0.8), Vec3::new(0.0, 0.0, -0.1));
        let traj = integrate(st, &f, &d, 1e-3, StopRule::Steps(200)).unwrap();
        assert!(dalpha_dt_check(&traj).unwrap() < 1e-6);
    }

    #[test]
    fn local_frame_integration_matches_cartesian() {
        let d = ConvexDomain::ellipsoid([1.5, 1.0, 1.2]).unwrap();
        let f = UniformBallField { density: 1.0, radius: 1.0, center: Vec3::zeros() };
        let x0 = Vec3::new(0.2, 0.85, 0.1);
        let v0 = Vec3::new(0.6, 0.05, -0.3);
        let li = LocalIntegrator { domain: &d, field: &f };
        let mut ls = li.from_cartesian(&x0, &v0).unwrap();
        let mut st = PhaseState::new(x0, v0);
        let dt = 1e-3;
        for _ in 0..100 {
            st = advance(&st, &f, &d, dt, None).unwrap();
            ls = li.step(&ls, dt).unwrap();
        }
        assert_eq!(st.reflections, 0);
        let (lp, _) = d.to_local(&st.x, &st.v).unwrap();
        assert!((lp.x_perp - ls.x_perp).abs() < 1e-6, "{} vs {}", lp.x_perp, ls.x_perp);
        assert!((lp.v_perp - ls.v_perp).abs() < 1e-6, "{} vs {}", lp.v_perp, ls.v_perp);
        let (x, v) = li.to_cartesian(&ls).unwrap();
        assert!((x - st.x).norm() < 1e-6 && (v - st.v).norm() < 1e-6);
    }
}
