//! Mode dispatch for the command-line runner and the CSV / JSON artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, DecaySource, FieldChoice, Mode, RunConfig};
use crate::dynamics::{dalpha_dt_check, integrate, velocity_lemma_ratio, DynamicsError, PhaseState, StopRule, Trajectory};
use crate::field::{
    boundary_decay_scan, solve_poisson, write_dump, DecayScanSpec, DensityGrid, FieldError, ForceField, PotentialField,
    StaticDensity, ZeroField,
};
use crate::geometry::{ConvexDomain, DomainShape, GeometryError, Vec3};
use crate::grid::{CellGrid, GridError};
use crate::kinetic::{
    picard_run, sample_or_empty, self_consistent_run, validate_initial, DiagnosticsRecord, KineticError, StepParams,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_INVARIANT: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("output error: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Invariant(_) => EXIT_INVARIANT,
            RunError::Solver(_) | RunError::Io(_) => EXIT_SOLVER,
        }
    }
}

impl From<FieldError> for RunError {
    fn from(e: FieldError) -> Self {
        match e {
            FieldError::MaximumPrinciple(_) | FieldError::NonpositiveMargin(_) | FieldError::ContinuityViolated(_) => {
                RunError::Invariant(e.to_string())
            }
            FieldError::LadderExitsGrid { .. } => RunError::Config(ConfigError::Invalid { field: "decay_scan.d0".into(), message: e.to_string() }),
            _ => RunError::Solver(e.to_string()),
        }
    }
}

impl From<GridError> for RunError {
    fn from(e: GridError) -> Self {
        RunError::Solver(e.to_string())
    }
}

impl From<GeometryError> for RunError {
    fn from(e: GeometryError) -> Self {
        RunError::Solver(e.to_string())
    }
}

impl From<DynamicsError> for RunError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::FieldEvalFailure(f) => f.into(),
            DynamicsError::OutsideDomain(_) => RunError::Invariant(e.to_string()),
            _ => RunError::Solver(e.to_string()),
        }
    }
}

impl From<KineticError> for RunError {
    fn from(e: KineticError) -> Self {
        match e {
            KineticError::Field(f) => f.into(),
            KineticError::Dynamics(d) => d.into(),
            KineticError::Geometry(g) => g.into(),
            KineticError::InvalidProfile(m) => RunError::Config(ConfigError::Invalid { field: "initial.profile".into(), message: m }),
            KineticError::EmptySupport => RunError::Config(ConfigError::Invalid { field: "initial.profile".into(), message: e.to_string() }),
            _ => RunError::Invariant(e.to_string()),
        }
    }
}

/// Floating-point cell with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() { format!("{x:.16e}") } else { format!("{x}") }
}

/// CSV text with a header row and LF line endings.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(columns: &[&str]) -> Self {
        Csv { text: columns.join(",") + "\n" }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn float_row(&mut self, values: &[f64]) {
        let cells: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
        self.row(&cells);
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, &self.text)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

pub fn diagnostics_csv(records: &[DiagnosticsRecord]) -> Csv {
    let mut csv = Csv::new(&DiagnosticsRecord::COLUMNS);
    for r in records {
        csv.float_row(&r.values());
    }
    csv
}

pub fn trajectory_csv(traj: &Trajectory) -> Csv {
    let mut csv = Csv::new(&["s", "X1", "X2", "X3", "V1", "V2", "V3", "x_perp", "v_perp", "alpha", "reflections"]);
    for st in &traj.states {
        let (xp, vp) = st.local.map_or((f64::NAN, f64::NAN), |lp| (lp.x_perp, lp.v_perp));
        let mut cells: Vec<String> = [st.s, st.x.x, st.x.y, st.x.z, st.v.x, st.v.y, st.v.z, xp, vp, st.alpha.unwrap_or(f64::NAN)]
            .iter()
            .map(|v| fmt_f64(*v))
            .collect();
        cells.push(st.reflections.to_string());
        csv.row(&cells);
    }
    csv
}

/// Outcome of a completed run: files written and the exit status to report.
#[derive(Debug)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
    pub message: String,
}

struct Out {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Out {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn dumps(&mut self, rho: &DensityGrid, phi: &PotentialField, time: f64) -> std::io::Result<()> {
        let spec = rho.grid().spec();
        write_dump(&self.dir, "rho", "rho", spec, time, &rho.to_full())?;
        write_dump(&self.dir, "phi", "phi", spec, time, &phi.to_full())?;
        for name in ["rho.bin", "rho.json", "phi.bin", "phi.json"] {
            self.files.push(self.dir.join(name));
        }
        Ok(())
    }
}

/// Run the configured mode, writing artifacts under `cfg.output_dir`.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    let domain = cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut out = Out { dir: cfg.output_dir.clone(), files: Vec::new() };
    let manifest = out.path("manifest.json");
    write_json(&manifest, cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| RunError::Solver(e.to_string()))?;
    let (code, message) = pool.install(|| match cfg.mode {
        Mode::PoissonTest => poisson_test(cfg, &domain, &mut out),
        Mode::Trajectory => trajectory(cfg, &domain, &mut out),
        Mode::VelocityLemma => velocity_lemma(cfg, &domain, &mut out),
        Mode::DecayScan => decay_scan(cfg, &domain, &mut out),
        Mode::Picard => picard(cfg, &domain, &mut out),
        Mode::Run => self_consistent(cfg, &domain, &mut out),
    })?;
    Ok(RunOutcome { exit_code: code, files: out.files, message })
}

type ModeResult = Result<(i32, String), RunError>;

/// Exact potential for a uniform density in a ball or ellipsoid.
fn uniform_exact(domain: &ConvexDomain, density: f64) -> Option<impl Fn(&Vec3) -> f64 + '_> {
    let c = domain.center();
    let a = match domain.shape() {
        DomainShape::Ball { radius } => [*radius; 3],
        DomainShape::Ellipsoid { semi_axes } => *semi_axes,
        DomainShape::LevelSet { .. } => return None,
    };
    let k = density / (2.0 * a.iter().map(|s| 1.0 / (s * s)).sum::<f64>());
    Some(move |x: &Vec3| {
        let y = x - c;
        k * ((0..3).map(|i| y[i] * y[i] / (a[i] * a[i])).sum::<f64>() - 1.0)
    })
}

fn poisson_test(cfg: &RunConfig, domain: &ConvexDomain, out: &mut Out) -> ModeResult {
    let block = &cfg.poisson_test;
    let exact = uniform_exact(domain, block.density).ok_or_else(|| {
        ConfigError::Invalid { field: "domain".into(), message: "poisson-test needs a ball or ellipsoid".into() }
    })?;
    let mut csv = Csv::new(&["h", "linf_error", "observed_order", "iterations", "residual"]);
    let mut prev: Option<(f64, f64)> = None;
    let mut last = None;
    for &n in &block.levels {
        let h = 0.5 * domain.diameter() / n as f64;
        let grid = CellGrid::new(domain, h)?;
        let rho = DensityGrid::from_fn(&grid, |_| block.density);
        let phi = solve_poisson(&rho, cfg.grid.tol, None)?;
        let err = (0..grid.n_unknowns())
            .map(|u| (phi.values()[u] - exact(&grid.center_of_unknown(u))).abs())
            .fold(0.0, f64::max);
        let order = prev.map_or(f64::NAN, |(hp, ep)| (ep / err).ln() / (hp / h).ln());
        info!("h = {h:.5}: error {err:.3e}, order {order:.3}");
        csv.row(&[fmt_f64(h), fmt_f64(err), fmt_f64(order), phi.iterations.to_string(), fmt_f64(phi.residual)]);
        prev = Some((h, err));
        last = Some((rho, phi));
    }
    csv.write(&out.path("poisson_convergence.csv"))?;
    if let Some((rho, phi)) = last {
        out.dumps(&rho, &phi, 0.0)?;
    }
    Ok((EXIT_OK, "convergence table written".into()))
}

fn build_field(choice: &FieldChoice, cfg: &RunConfig, domain: &ConvexDomain) -> Result<Box<dyn ForceField>, RunError> {
    Ok(match choice {
        FieldChoice::Zero => Box::new(ZeroField),
        FieldChoice::Uniform { density } => {
            let grid = CellGrid::new(domain, cfg.grid.spacing(domain))?;
            Box::new(solve_poisson(&DensityGrid::from_fn(&grid, |_| *density), cfg.grid.tol, None)?)
        }
        FieldChoice::Initial => {
            let grid = CellGrid::new(domain, cfg.grid.spacing(domain))?;
            let p = &cfg.initial.data.profile;
            Box::new(solve_poisson(&DensityGrid::from_fn(&grid, |x| p.spatial_density(domain, x)), cfg.grid.tol, None)?)
        }
    })
}

#[derive(Serialize)]
struct TrajectorySummary {
    steps: usize,
    reflections: usize,
    grazing_reflections: usize,
    /// `max |H(s) − H(0)| / |H(0)|` with `H = |V|²/2 − φ(X)`.
    energy_drift: f64,
    events: Vec<crate::dynamics::ReflectionEvent>,
}

fn trajectory(cfg: &RunConfig, domain: &ConvexDomain, out: &mut Out) -> ModeResult {
    let block = &cfg.trajectory;
    let field = build_field(&block.field, cfg, domain)?;
    let x0 = Vec3::from(block.x0);
    if !domain.contains_closure(&x0) {
        return Err(ConfigError::Invalid { field: "trajectory.x0".into(), message: "must lie in the domain".into() }.into());
    }
    let steps = (cfg.time.t_end / cfg.time.dt).round() as usize;
    let traj = integrate(PhaseState::new(x0, Vec3::from(block.v0)), field.as_ref(), domain, cfg.time.dt, StopRule::Steps(steps))?;
    let energy = |st: &PhaseState| -> Result<f64, RunError> { Ok(0.5 * st.v.norm_squared() - field.potential(&st.x)?) };
    let h0 = energy(&traj.states[0])?;
    let mut drift: f64 = 0.0;
    for st in &traj.states {
        let dh = (energy(st)? - h0).abs();
        drift = drift.max(if h0 != 0.0 { dh / h0.abs() } else { dh });
    }
    trajectory_csv(&traj).write(&out.path("trajectory.csv"))?;
    let summary = TrajectorySummary {
        steps,
        reflections: traj.events.len(),
        grazing_reflections: traj.events.iter().filter(|e| e.is_grazing()).count(),
        energy_drift: drift,
        events: traj.events.clone(),
    };
    write_json(&out.path("trajectory_summary.json"), &summary)?;
    Ok((EXIT_OK, format!("{} reflections, energy drift {drift:.3e}", summary.reflections)))
}

/// Launch state for a grazing run: depth `x⊥` below the foot point in
/// direction `dir`, moving tangentially with `speed`.
pub fn grazing_launch(domain: &ConvexDomain, dir: &Vec3, depth: f64, speed: f64) -> Result<PhaseState, GeometryError> {
    let p = domain.boundary_point_along(dir);
    let frame = domain.frame_curvatures(&p)?;
    Ok(PhaseState::new(p - depth * frame.normal, speed * frame.u[0]))
}

fn velocity_lemma(cfg: &RunConfig, domain: &ConvexDomain, out: &mut Out) -> ModeResult {
    let block = &cfg.velocity_lemma;
    let field = build_field(&block.field, cfg, domain)?;
    let dir = Vec3::from(block.direction);
    let mut csv = Csv::new(&[
        "x_perp0", "dt", "reflections", "alpha_min", "alpha_max", "alpha_ratio", "distance_ratio", "dalpha_quotient", "band_exit",
    ]);
    let mut all_finite = true;
    for &frac in &block.depths {
        let depth = frac * 0.5 * domain.diameter();
        for dt in [cfg.time.dt, 0.5 * cfg.time.dt] {
            let start = grazing_launch(domain, &dir, depth, block.speed)?;
            let max_steps = (20.0 * domain.diameter() / (block.speed * dt)).ceil() as usize;
            let traj = integrate(start, field.as_ref(), domain, dt, StopRule::Reflections { count: block.reflections, max_steps })?;
            let r = velocity_lemma_ratio(&traj);
            let q = dalpha_dt_check(&traj).unwrap_or(f64::NAN);
            all_finite &= r.alpha_ratio.is_finite() && r.distance_ratio.is_finite();
            let mut cells: Vec<String> = [depth, dt].iter().map(|v| fmt_f64(*v)).collect();
            cells.push(traj.states.last().map_or(0, |s| s.reflections).to_string());
            cells.extend([r.min_alpha, r.max_alpha, r.alpha_ratio, r.distance_ratio, q].iter().map(|v| fmt_f64(*v)));
            cells.push(r.band_exit.to_string());
            csv.row(&cells);
        }
    }
    csv.write(&out.path("velocity_lemma.csv"))?;
    if all_finite {
        Ok((EXIT_OK, "all ratios finite".into()))
    } else {
        Ok((EXIT_INVARIANT, "non-finite velocity-lemma ratio".into()))
    }
}

fn decay_scan(cfg: &RunConfig, domain: &ConvexDomain, out: &mut Out) -> ModeResult {
    let block = &cfg.decay_scan;
    let grid = CellGrid::new(domain, cfg.grid.spacing(domain))?;
    let spec = DecayScanSpec { direction: block.direction, d0: block.d0, levels: block.levels, time: block.time, dt: block.dt };
    let c = domain.center();
    let scan = match &block.source {
        DecaySource::Linear { background, gradient } => {
            let g = Vec3::from(*gradient);
            let src = StaticDensity(move |x: &Vec3| background + g.dot(&(x - c)));
            boundary_decay_scan(&src, &grid, cfg.grid.tol, &spec)?
        }
        DecaySource::MovingBlob(blob) => boundary_decay_scan(blob, &grid, cfg.grid.tol, &spec)?,
    };
    let mut csv = Csv::new(&["d", "dphi_du1", "dphi_du2", "dphi_dt"]);
    for r in &scan.rows {
        csv.float_row(&[r.d, r.dphi_du1, r.dphi_du2, r.dphi_dt]);
    }
    csv.write(&out.path("decay_scan.csv"))?;
    #[derive(Serialize)]
    struct Fit<'a> {
        tangential: &'a crate::field::EnvelopeFit,
        time: &'a crate::field::EnvelopeFit,
        continuity_residual: f64,
    }
    write_json(&out.path("decay_fit.json"), &Fit { tangential: &scan.tangential_fit, time: &scan.time_fit, continuity_residual: scan.continuity_residual })?;
    Ok((EXIT_OK, format!("tangential C = {:.4e}, R² = {:.4}", scan.tangential_fit.c, scan.tangential_fit.r_squared)))
}

fn step_params(cfg: &RunConfig) -> StepParams {
    StepParams { t_end: cfg.time.t_end, dt: cfg.time.dt, tol: cfg.grid.tol, workers: cfg.workers, blowup_ceiling: cfg.blowup_ceiling }
}

fn cfl_advisory(cfg: &RunConfig, h: f64, q0: f64) {
    if q0 > 0.0 && cfg.time.dt >= 0.5 * h / q0 {
        warn!("dt = {} is not below 0.5 h / Q(0) = {}", cfg.time.dt, 0.5 * h / q0);
    }
}

fn ensemble_setup(cfg: &RunConfig, domain: &ConvexDomain) -> Result<(Arc<CellGrid>, crate::kinetic::ParticleEnsemble), RunError> {
    let h = cfg.grid.spacing(domain);
    let grid = CellGrid::new(domain, h)?;
    let ens = sample_or_empty(&cfg.initial.data, domain, cfg.initial.particles, cfg.initial.seed)?;
    info!("{} particles, total weight {:.6e}", ens.len(), ens.total_weight());
    cfl_advisory(cfg, h, ens.q0);
    Ok((grid, ens))
}

fn picard(cfg: &RunConfig, domain: &ConvexDomain, out: &mut Out) -> ModeResult {
    let (grid, ens) = ensemble_setup(cfg, domain)?;
    let summary = picard_run(&ens, &grid, &step_params(cfg), cfg.picard.n_max, cfg.picard.tol)?;
    write_json(&out.path("picard_summary.json"), &summary)?;
    if let Some(last) = summary.iterates.last() {
        diagnostics_csv(&last.records).write(&out.path("diagnostics.csv"))?;
    }
    let deltas = summary.deltas();
    let mut msg = String::new();
    let _ = write!(msg, "{} iterates, converged = {}, deltas {:?}", summary.iterates.len(), summary.converged, deltas);
    if summary.iterates.iter().any(|i| !i.q_bound_holds) {
        return Ok((EXIT_INVARIANT, format!("Q bound violated; {msg}")));
    }
    Ok((EXIT_OK, msg))
}

fn self_consistent(cfg: &RunConfig, domain: &ConvexDomain, out: &mut Out) -> ModeResult {
    let (grid, ens) = ensemble_setup(cfg, domain)?;
    let validation = validate_initial(&cfg.initial.data, &grid, cfg.grid.tol)?;
    write_json(&out.path("validation.json"), &validation)?;
    if !validation.passed {
        warn!("initial data fails the wall compatibility or flatness checks");
    }
    let f_sup = cfg.initial.data.profile.sup();
    let result = self_consistent_run(ens, f_sup, &grid, &step_params(cfg))?;
    diagnostics_csv(&result.records).write(&out.path("diagnostics.csv"))?;
    write_json(&out.path("conservation.json"), &result.report)?;
    out.dumps(&result.rho, &result.phi, result.rho.time)?;
    let r = &result.report;
    if !r.weights_invariant || !r.all_weights_nonnegative {
        return Ok((EXIT_INVARIANT, "particle weights changed".into()));
    }
    if !r.density_bound_holds() {
        return Ok((EXIT_INVARIANT, format!("density bound exceeded: ratio {:.4}", r.density_bound_ratio)));
    }
    Ok((EXIT_OK, format!("energy drift {:.3e}, Q {:.6} -> {:.6}", r.energy_drift, r.q_initial, r.q_final)))
}
