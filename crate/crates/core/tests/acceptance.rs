//! Acceptance suite: one test per criterion, each printing a single
//! `[PASS]`/`[FAIL]` line before asserting. Run with `--nocapture` to see them.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vpconvex::dynamics::{
    dalpha_dt_check, integrate, specular_reflect, velocity_lemma_ratio, PhaseState, StopRule,
};
use vpconvex::field::{
    boundary_decay_scan, hopf_margin, solve_poisson, DecayScanSpec, DensityGrid, ForceField, StaticDensity,
    UniformBallField, ZeroField, DEFAULT_TOL,
};
use vpconvex::geometry::{fibonacci_directions, ConvexDomain, Vec3};
use vpconvex::grid::CellGrid;
use vpconvex::kinetic::{
    picard_run, sample_ensemble, self_consistent_run, InitialData, Profile, RunOutput, StepParams, DENSITY_SLACK,
};
use vpconvex::run::grazing_launch;

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {id:>2} {name}: {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn sci(xs: &[f64]) -> String {
    let cells: Vec<String> = xs.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", cells.join(", "))
}

fn within(elapsed: Duration, budget_s: f64) -> bool {
    elapsed.as_secs_f64() <= budget_s
}

fn unit_ball() -> ConvexDomain {
    ConvexDomain::ball(1.0).unwrap()
}

fn ball_field() -> UniformBallField {
    UniformBallField { density: 1.0, radius: 1.0, center: Vec3::zeros() }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_in_ball(rng: &mut ChaCha8Rng, r_max: f64) -> Vec3 {
    random_unit(rng) * r_max * rng.gen::<f64>().cbrt()
}

#[test]
fn criterion_01_poisson_oracle() {
    let t = Instant::now();
    let domain = unit_ball();
    let mut errors = Vec::new();
    for n in [16.0, 32.0, 64.0] {
        let grid = CellGrid::new(&domain, 1.0 / n).unwrap();
        let phi = solve_poisson(&DensityGrid::from_fn(&grid, |_| 1.0), DEFAULT_TOL, None).unwrap();
        let err = (0..grid.n_unknowns())
            .map(|u| {
                let x = grid.center_of_unknown(u);
                (phi.values()[u] - (x.norm_squared() - 1.0) / 6.0).abs()
            })
            .fold(0.0, f64::max);
        errors.push(err);
    }
    let orders: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let elapsed = t.elapsed();
    let pass = orders.iter().all(|&p| p >= 1.8) && errors[2] <= 5e-4 && within(elapsed, 120.0);
    verdict(1, "Poisson oracle", pass, format!("errors {}, orders {orders:.3?}, {elapsed:.1?}", sci(&errors)));
}

#[test]
fn criterion_02_reflection_isometry() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut speed, mut tangential, mut involution): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..10_000 {
        let n = random_unit(&mut rng);
        let v = random_unit(&mut rng) * rng.gen_range(1e-3..1e3);
        let r = specular_reflect(&v, &n);
        let vn = v.norm();
        speed = speed.max((r.norm() - vn).abs() / vn);
        let tv = v - v.dot(&n) * n;
        let tr = r - r.dot(&n) * n;
        tangential = tangential.max((tv - tr).norm() / vn);
        involution = involution.max((specular_reflect(&r, &n) - v).norm() / vn);
    }
    let elapsed = t.elapsed();
    let pass = speed <= 1e-12 && tangential <= 1e-12 && involution <= 1e-14 && within(elapsed, 1.0);
    verdict(
        2,
        "reflection isometry",
        pass,
        format!("speed {speed:.2e}, tangential {tangential:.2e}, involution {involution:.2e}, {elapsed:.1?}"),
    );
}

#[test]
fn criterion_03_billiard_reversibility() {
    let t = Instant::now();
    let domain = unit_ball();
    let l = domain.diameter();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dt = 1e-3;
    let mut worst: f64 = 0.0;
    let mut max_refl = 0;
    for _ in 0..100 {
        let x0 = random_in_ball(&mut rng, 0.9);
        let v0 = random_unit(&mut rng) * rng.gen_range(0.5..2.0);
        let fwd = integrate(PhaseState::new(x0, v0), &ZeroField, &domain, dt, StopRule::Reflections { count: 5, max_steps: 20_000 })
            .unwrap();
        let end = fwd.states.last().unwrap();
        let steps = fwd.states.len() - 1;
        max_refl = max_refl.max(end.reflections);
        let back = integrate(PhaseState::new(end.x, -end.v), &ZeroField, &domain, dt, StopRule::Steps(steps)).unwrap();
        let fin = back.states.last().unwrap();
        worst = worst.max((fin.x - x0).norm() / l).max((fin.v + v0).norm() / v0.norm());
    }
    let elapsed = t.elapsed();
    let pass = worst <= 1e-6 && max_refl <= 5 && within(elapsed, 10.0);
    verdict(3, "billiard reversibility", pass, format!("max return error {worst:.2e}·L, ≤ {max_refl} reflections, {elapsed:.1?}"));
}

/// Largest `|H(s) − H(0)| / |H(0)|` along one trajectory in the exact ball field.
fn energy_drift(field: &UniformBallField, domain: &ConvexDomain, x0: Vec3, v0: Vec3, dt: f64, t_end: f64) -> f64 {
    let steps = (t_end / dt).round() as usize;
    let h = |x: &Vec3, v: &Vec3| 0.5 * v.norm_squared() - field.potential(x).unwrap();
    let h0 = h(&x0, &v0);
    let mut state = PhaseState::new(x0, v0);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        state = vpconvex::dynamics::advance(&state, field, domain, dt, None).unwrap();
        worst = worst.max((h(&state.x, &state.v) - h0).abs() / h0.abs());
    }
    worst
}

#[test]
fn criterion_04_static_field_energy() {
    let t = Instant::now();
    let domain = unit_ball();
    let field = ball_field();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let starts: Vec<(Vec3, Vec3)> = (0..1000)
        .map(|_| (random_in_ball(&mut rng, 0.9), random_unit(&mut rng) * rng.gen_range(0.1..1.0)))
        .collect();
    let coarse: Vec<f64> = starts.iter().map(|(x, v)| energy_drift(&field, &domain, *x, *v, 1e-3, 5.0)).collect();
    let fine: Vec<f64> = starts.iter().map(|(x, v)| energy_drift(&field, &domain, *x, *v, 5e-4, 5.0)).collect();
    let max_c = coarse.iter().cloned().fold(0.0, f64::max);
    let max_f = fine.iter().cloned().fold(0.0, f64::max);
    let order = (max_c / max_f).log2();
    let mut orders: Vec<f64> = coarse.iter().zip(&fine).map(|(c, f)| (c / f).log2()).collect();
    orders.sort_by(f64::total_cmp);
    let median = orders[orders.len() / 2];
    let elapsed = t.elapsed();
    let pass = max_c <= 1e-4 && order >= 1.8 && median >= 1.8 && within(elapsed, 60.0);
    verdict(
        4,
        "static-field energy",
        pass,
        format!("max |ΔH|/|H| {max_c:.2e} (dt) / {max_f:.2e} (dt/2), order {order:.2}, median order {median:.2}, {elapsed:.1?}"),
    );
}

struct SweepRow {
    depth: f64,
    dt: f64,
    ratio: f64,
    quotient: f64,
}

/// Grazing launches below the north pole in the solved field of `ρ ≡ 1`.
fn grazing_sweep() -> &'static (Vec<SweepRow>, Duration) {
    static SWEEP: OnceLock<(Vec<SweepRow>, Duration)> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let t = Instant::now();
        let domain = unit_ball();
        let grid = CellGrid::new(&domain, 1.0 / 32.0).unwrap();
        let field = solve_poisson(&DensityGrid::from_fn(&grid, |_| 1.0), DEFAULT_TOL, None).unwrap();
        let mut rows = Vec::new();
        for depth in [0.04, 0.02, 0.01, 0.005] {
            for dt in [1e-3, 5e-4] {
                let start = grazing_launch(&domain, &Vec3::new(0.0, 0.0, 1.0), depth, 1.0).unwrap();
                let traj = integrate(start, &field, &domain, dt, StopRule::Reflections { count: 5, max_steps: 100_000 }).unwrap();
                let report = velocity_lemma_ratio(&traj);
                let quotient = dalpha_dt_check(&traj).unwrap_or(f64::NAN);
                let ratio = if report.band_exit { f64::NAN } else { report.distance_ratio };
                rows.push(SweepRow { depth, dt, ratio, quotient });
            }
        }
        (rows, t.elapsed())
    })
}

fn rel_change(a: f64, b: f64) -> f64 {
    (b / a - 1.0).abs()
}

#[test]
fn criterion_05_velocity_lemma() {
    let (rows, elapsed) = grazing_sweep();
    let finite = rows.iter().all(|r| r.ratio.is_finite() && r.ratio >= 1.0);
    let dt_change = rows.chunks(2).map(|p| rel_change(p[0].ratio, p[1].ratio)).fold(0.0, f64::max);
    let coarse: Vec<&SweepRow> = rows.iter().filter(|r| r.dt == 1e-3).collect();
    let depth_change = coarse.windows(2).map(|w| rel_change(w[0].ratio, w[1].ratio)).fold(0.0, f64::max);
    let ratios: Vec<f64> = coarse.iter().map(|r| r.ratio).collect();
    let pass = finite && dt_change <= 0.2 && depth_change <= 0.2 && within(*elapsed, 120.0);
    verdict(
        5,
        "Velocity Lemma",
        pass,
        format!(
            "ratios {ratios:.4?} at x⊥(0) {:?}, dt-halving change {dt_change:.3}, x⊥-halving change {depth_change:.3}, {elapsed:.1?}",
            coarse.iter().map(|r| r.depth).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_06_dalpha_bound() {
    let (rows, elapsed) = grazing_sweep();
    let bounded = rows.iter().all(|r| r.quotient.is_finite());
    let dt_change = rows.chunks(2).map(|p| rel_change(p[0].quotient, p[1].quotient)).fold(0.0, f64::max);
    let quotients: Vec<f64> = rows.iter().map(|r| r.quotient).collect();
    let pass = bounded && dt_change <= 0.2 && within(*elapsed, 120.0);
    verdict(
        6,
        "dα/dt bound",
        pass,
        format!(
            "quotients {quotients:.4?} (dt {:?} pairs), dt-halving change {dt_change:.3}, {elapsed:.1?}",
            rows.iter().take(2).map(|r| r.dt).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_07_hopf_margin() {
    let t = Instant::now();
    let domain = unit_ball();
    let grid = CellGrid::new(&domain, 1.0 / 64.0).unwrap();
    let field = solve_poisson(&DensityGrid::from_fn(&grid, |_| 1.0), DEFAULT_TOL, None).unwrap();
    let bands: Vec<f64> = (0..4).map(|m| 0.4 * 0.5f64.powi(m)).collect();
    let eps: Vec<f64> = bands.iter().map(|&b| hopf_margin(&field, &domain, b, 256, 8).unwrap().eps0).collect();
    let errs: Vec<f64> = eps.iter().map(|e| (3.0 * e - 1.0).abs()).collect();
    let approaching = errs.windows(2).all(|w| w[1] < w[0]);
    let elapsed = t.elapsed();
    let pass = approaching && errs[3] <= 0.05 && within(elapsed, 60.0);
    verdict(
        7,
        "Hopf margin",
        pass,
        format!("bands {bands:?} → ε₀ {eps:.5?}, final relative error {:.4}, {elapsed:.1?}", errs[3]),
    );
}

#[test]
fn criterion_08_boundary_decay() {
    let t = Instant::now();
    let domain = unit_ball();
    let h = 1.0 / 32.0;
    let grid = CellGrid::new(&domain, h).unwrap();
    let spec = DecayScanSpec { direction: [1.0, 0.0, 0.0], d0: 0.2, levels: 7, time: 0.0, dt: 1e-2 };
    let scan = boundary_decay_scan(&StaticDensity(|x: &Vec3| 1.0 + x.y), &grid, DEFAULT_TOL, &spec).unwrap();
    let fit = scan.tangential_fit;
    let under = scan.rows.iter().all(|r| r.dphi_du1.hypot(r.dphi_du2) <= fit.c * r.d * (1.0 + r.d.ln().abs()) * (1.0 + 1e-12));

    let radial = StaticDensity(|x: &Vec3| 1.0 + x.norm_squared());
    let control = boundary_decay_scan(&radial, &grid, DEFAULT_TOL, &spec).unwrap();
    let control_max = control.rows.iter().map(|r| r.dphi_du1.hypot(r.dphi_du2)).fold(0.0, f64::max);
    // Algebraic error of a solve at relative residual `tol`: condition number
    // `(L/h)²` times the potential scale, differenced over one cell.
    let phi = solve_poisson(&DensityGrid::from_fn(&grid, |x| radial.0(x)), DEFAULT_TOL, None).unwrap();
    let phi_max = phi.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let noise = DEFAULT_TOL * (domain.diameter() / h).powi(2) * phi_max / h;

    let elapsed = t.elapsed();
    let pass = under && fit.r_squared >= 0.9 && control_max <= noise && within(elapsed, 300.0);
    let tang: Vec<f64> = scan.rows.iter().map(|r| r.dphi_du1.hypot(r.dphi_du2)).collect();
    verdict(
        8,
        "boundary decay",
        pass,
        format!(
            "|∇_τφ| {}, C {:.4}, R² {:.4}, control {control_max:.2e} ≤ noise {noise:.2e}, {elapsed:.1?}",
            sci(&tang),
            fit.c,
            fit.r_squared
        ),
    );
}

fn bump() -> Profile {
    Profile::MaxwellianBump { amplitude: 4.0, center: [0.0; 3], x_radius: 0.7, v_thermal: 0.25, v_cut: 1.0 }
}

fn ball_params(t_end: f64) -> StepParams {
    StepParams { t_end, dt: 1e-3, tol: DEFAULT_TOL, workers: 1, blowup_ceiling: None }
}

/// The self-consistent ball run shared by criteria 9, 10 and 12.
fn conservation_run() -> &'static (RunOutput, Duration) {
    static RUN: OnceLock<(RunOutput, Duration)> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = Instant::now();
        let domain = unit_ball();
        let grid = CellGrid::new(&domain, domain.diameter() / 48.0).unwrap();
        let profile = bump();
        let ens = sample_ensemble(&InitialData::new(profile.clone()), &domain, 100_000, 1).unwrap();
        let out = self_consistent_run(ens, profile.sup(), &grid, &ball_params(1.0)).expect("self-consistent run failed");
        (out, t.elapsed())
    })
}

#[test]
fn criterion_09_conservation() {
    let (out, elapsed) = conservation_run();
    let r = &out.report;
    let pass = r.max_mass_step_drift <= 1e-10 && r.weights_invariant && r.energy_drift <= 0.01 && within(*elapsed, 600.0);
    verdict(
        9,
        "conservation suite",
        pass,
        format!(
            "mass step drift {:.2e}, weights invariant {}, energy drift {:.2e}, {} reflections, {elapsed:.1?}",
            r.max_mass_step_drift, r.weights_invariant, r.energy_drift, r.reflections
        ),
    );
}

#[test]
fn criterion_10_density_bound() {
    let (out, _) = conservation_run();
    let r = &out.report;
    let pass = r.density_bound_holds() && r.density_bound_ratio <= DENSITY_SLACK;
    verdict(10, "density bound", pass, format!("max ρ_max / ((4π/3)‖f₀‖∞Q³) = {:.4} ≤ {DENSITY_SLACK}", r.density_bound_ratio));
}

#[test]
fn criterion_11_picard_convergence() {
    let t = Instant::now();
    let domain = unit_ball();
    let grid = CellGrid::new(&domain, domain.diameter() / 48.0).unwrap();
    let profile = bump();
    let ens = sample_ensemble(&InitialData::new(profile.clone()), &domain, 100_000, 1).unwrap();
    let params = ball_params(0.1);
    let summary = picard_run(&ens, &grid, &params, 6, 1e-12).unwrap();
    let reference = self_consistent_run(ens, profile.sup(), &grid, &params).unwrap();
    let deltas = summary.deltas();
    let decreasing = deltas.len() >= 3 && deltas.windows(2).all(|w| w[1] < w[0]);

    let last = summary.iterates.last().unwrap();
    let mut diag_gap: f64 = 0.0;
    for (a, b) in last.records.iter().zip(&reference.records) {
        for (x, y) in [(a.mass, b.mass), (a.total_energy, b.total_energy), (a.q, b.q)] {
            diag_gap = diag_gap.max((x - y).abs() / y.abs());
        }
    }
    let prev = &summary.iterates[summary.iterates.len() - 2];
    let q_gap = last.q.iter().zip(&prev.q).map(|(a, b)| (a - b).abs() / b).fold(0.0, f64::max);
    let elapsed = t.elapsed();
    let pass = decreasing && diag_gap <= 0.05 && q_gap <= 0.02 && within(elapsed, 600.0);
    verdict(
        11,
        "Picard convergence",
        pass,
        format!("deltas {}, diagnostics gap {diag_gap:.2e}, last-two Q gap {q_gap:.2e}, {elapsed:.1?}", sci(&deltas)),
    );
}

#[test]
fn criterion_12_no_blowup() {
    let (out, _) = conservation_run();
    let r = &out.report;
    let q_max = out.records.iter().map(|rec| rec.q).fold(0.0, f64::max);
    let pass = q_max < r.q_ceiling;
    verdict(
        12,
        "no blow-up sentinel",
        pass,
        format!("Q(0) {:.5}, max Q {q_max:.5} < ceiling {:.4}; run finished without a blow-up error", r.q_initial, r.q_ceiling),
    );
}

#[test]
fn hopf_scan_matches_exact_ball_margin() {
    // For φ = (r² − 1)/6 in the unit ball, −φ/x⊥ = (2 − x⊥)/6 is smallest at x⊥ = band.
    let domain = unit_ball();
    for band in [0.4, 0.1, 0.025] {
        let e = hopf_margin(&ball_field(), &domain, band, 64, 8).unwrap();
        assert!((e.eps0 - (2.0 - band) / 6.0).abs() <= 1e-12, "band {band}: {}", e.eps0);
    }
    assert_eq!(fibonacci_directions(64).len(), 64);
}
