//! JSON run configuration with defaults and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::MovingBlob;
use crate::geometry::{ConvexDomain, DomainSpec};
use crate::kinetic::{InitialData, Profile};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] serde_json::Error),
    #[error("field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum Mode {
    PoissonTest,
    Trajectory,
    VelocityLemma,
    DecayScan,
    Picard,
    Run,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    /// Cell size; overrides `cells`.
    #[serde(default)]
    pub h: Option<f64>,
    /// Cells across the domain diameter when `h` is absent.
    #[serde(default = "default_cells")]
    pub cells: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_cells() -> usize {
    48
}

fn default_tol() -> f64 {
    1e-10
}

impl Default for GridBlock {
    fn default() -> Self {
        GridBlock { h: None, cells: default_cells(), tol: default_tol() }
    }
}

impl GridBlock {
    pub fn spacing(&self, domain: &ConvexDomain) -> f64 {
        self.h.unwrap_or(domain.diameter() / self.cells as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialBlock {
    #[serde(flatten)]
    pub data: InitialData,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_particles() -> usize {
    100_000
}

fn default_seed() -> u64 {
    1
}

impl Default for InitialBlock {
    fn default() -> Self {
        InitialBlock {
            data: InitialData::new(Profile::default()),
            particles: default_particles(),
            seed: default_seed(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeBlock {
    #[serde(default = "one")]
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_dt() -> f64 {
    1e-3
}

impl Default for TimeBlock {
    fn default() -> Self {
        TimeBlock { t_end: 1.0, dt: default_dt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardBlock {
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_picard_tol")]
    pub tol: f64,
}

fn default_n_max() -> usize {
    8
}

fn default_picard_tol() -> f64 {
    1e-3
}

impl Default for PicardBlock {
    fn default() -> Self {
        PicardBlock { n_max: default_n_max(), tol: default_picard_tol() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoissonTestBlock {
    /// Refinement levels: `h = (L/2)/n` for each entry.
    #[serde(default = "default_levels")]
    pub levels: Vec<usize>,
    /// Uniform density of the test problem.
    #[serde(default = "one")]
    pub density: f64,
}

fn default_levels() -> Vec<usize> {
    vec![16, 32, 64]
}

fn one() -> f64 {
    1.0
}

impl Default for PoissonTestBlock {
    fn default() -> Self {
        PoissonTestBlock { levels: default_levels(), density: 1.0 }
    }
}

/// Frozen field for single-trajectory modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldChoice {
    Zero,
    /// Grid solution for a uniform density.
    Uniform { density: f64 },
    /// Grid solution for the spatial density of the initial data.
    Initial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryBlock {
    #[serde(default = "default_x0")]
    pub x0: [f64; 3],
    #[serde(default = "default_v0")]
    pub v0: [f64; 3],
    #[serde(default = "default_field")]
    pub field: FieldChoice,
}

fn default_x0() -> [f64; 3] {
    [0.0, 0.0, 0.96]
}

fn default_v0() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

fn default_field() -> FieldChoice {
    FieldChoice::Uniform { density: 1.0 }
}

impl Default for TrajectoryBlock {
    fn default() -> Self {
        TrajectoryBlock { x0: default_x0(), v0: default_v0(), field: default_field() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityLemmaBlock {
    /// Initial wall distances as fractions of `L/2`.
    #[serde(default = "default_depths")]
    pub depths: Vec<f64>,
    /// Tangential launch speed.
    #[serde(default = "one")]
    pub speed: f64,
    /// Direction from the center to the launch foot point.
    #[serde(default = "default_direction")]
    pub direction: [f64; 3],
    #[serde(default = "default_reflections")]
    pub reflections: u32,
    #[serde(default = "default_field")]
    pub field: FieldChoice,
}

fn default_depths() -> Vec<f64> {
    vec![0.04, 0.02, 0.01, 0.005]
}

fn default_direction() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn default_reflections() -> u32 {
    5
}

impl Default for VelocityLemmaBlock {
    fn default() -> Self {
        VelocityLemmaBlock {
            depths: default_depths(),
            speed: 1.0,
            direction: default_direction(),
            reflections: default_reflections(),
            field: default_field(),
        }
    }
}

/// Density sources for the decay scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DecaySource {
    /// `background + gradient·(x − center)`.
    Linear { background: f64, gradient: [f64; 3] },
    MovingBlob(MovingBlob),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayBlock {
    #[serde(default = "default_source")]
    pub source: DecaySource,
    #[serde(default = "default_decay_direction")]
    pub direction: [f64; 3],
    #[serde(default = "default_d0")]
    pub d0: f64,
    #[serde(default = "default_decay_levels")]
    pub levels: usize,
    #[serde(default)]
    pub time: f64,
    #[serde(default = "default_decay_dt")]
    pub dt: f64,
}

fn default_source() -> DecaySource {
    DecaySource::Linear { background: 1.0, gradient: [0.0, 1.0, 0.0] }
}

fn default_decay_direction() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

fn default_d0() -> f64 {
    0.2
}

fn default_decay_levels() -> usize {
    7
}

fn default_decay_dt() -> f64 {
    1e-2
}

impl Default for DecayBlock {
    fn default() -> Self {
        DecayBlock {
            source: default_source(),
            direction: default_decay_direction(),
            d0: default_d0(),
            levels: default_decay_levels(),
            time: 0.0,
            dt: default_decay_dt(),
        }
    }
}

/// Full run configuration; serializing it gives the resolved manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub domain: DomainSpec,
    #[serde(default)]
    pub grid: GridBlock,
    #[serde(default)]
    pub initial: InitialBlock,
    #[serde(default)]
    pub time: TimeBlock,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Ceiling for `Q(t)`; derived from the initial state when absent.
    #[serde(default)]
    pub blowup_ceiling: Option<f64>,
    #[serde(default)]
    pub picard: PicardBlock,
    #[serde(default)]
    pub poisson_test: PoissonTestBlock,
    #[serde(default)]
    pub trajectory: TrajectoryBlock,
    #[serde(default)]
    pub velocity_lemma: VelocityLemmaBlock,
    #[serde(default)]
    pub decay_scan: DecayBlock,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_workers() -> usize {
    1
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    /// Check physical scales; returns the built domain.
    pub fn validate(&self) -> Result<ConvexDomain, ConfigError> {
        let domain = self.domain.build().map_err(|e| invalid("domain", e.to_string()))?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() { Ok(()) } else { Err(invalid(name, format!("must be positive, got {v}"))) }
        };
        if let Some(h) = self.grid.h {
            positive("grid.h", h)?;
        } else if self.grid.cells == 0 {
            return Err(invalid("grid.cells", "must be at least 1"));
        }
        if !(self.grid.tol > 0.0 && self.grid.tol < 1.0) {
            return Err(invalid("grid.tol", "must lie in (0, 1)"));
        }
        positive("time.t_end", self.time.t_end)?;
        positive("time.dt", self.time.dt)?;
        if self.time.dt > self.time.t_end {
            return Err(invalid("time.dt", "must not exceed time.t_end"));
        }
        if self.initial.particles == 0 {
            return Err(invalid("initial.particles", "must be at least 1"));
        }
        if let Some(d) = self.initial.data.delta0 {
            positive("initial.delta0", d)?;
        }
        self.initial.data.profile.validate(&domain).map_err(|e| invalid("initial.profile", e.to_string()))?;
        if self.workers == 0 {
            return Err(invalid("workers", "must be at least 1"));
        }
        if let Some(c) = self.blowup_ceiling {
            positive("blowup_ceiling", c)?;
        }
        if self.picard.n_max == 0 {
            return Err(invalid("picard.n_max", "must be at least 1"));
        }
        positive("picard.tol", self.picard.tol)?;
        if self.poisson_test.levels.len() < 2 || self.poisson_test.levels.contains(&0) {
            return Err(invalid("poisson_test.levels", "need at least two positive levels"));
        }
        positive("velocity_lemma.speed", self.velocity_lemma.speed)?;
        if self.velocity_lemma.depths.is_empty() {
            return Err(invalid("velocity_lemma.depths", "must not be empty"));
        }
        for d in &self.velocity_lemma.depths {
            positive("velocity_lemma.depths", *d)?;
        }
        positive("decay_scan.d0", self.decay_scan.d0)?;
        positive("decay_scan.dt", self.decay_scan.dt)?;
        if self.decay_scan.levels == 0 {
            return Err(invalid("decay_scan.levels", "must be at least 1"));
        }
        for (name, dir) in [("velocity_lemma.direction", self.velocity_lemma.direction), ("decay_scan.direction", self.decay_scan.direction)] {
            if dir.iter().map(|c| c * c).sum::<f64>() == 0.0 {
                return Err(invalid(name, "must be a nonzero vector"));
            }
        }
        Ok(domain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_json(r#"{"mode": "run", "domain": {"kind": "ball", "radius": 1.0}}"#).unwrap();
        assert_eq!(cfg.grid.cells, 48);
        assert_eq!(cfg.workers, 1);
        assert_eq!(cfg.time.dt, 1e-3);
        cfg.validate().unwrap();
        // the manifest round-trips
        let again: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn negative_radius_is_rejected() {
        let cfg = RunConfig::from_json(r#"{"mode": "run", "domain": {"kind": "ball", "radius": -1.0}}"#).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("domain"), "{err}");
    }

    #[test]
    fn unknown_field_reports_location() {
        let err = RunConfig::from_json("{\"mode\": \"run\",\n \"domain\": {\"kind\": \"ball\", \"radius\": 1.0},\n \"gird\": {}}").unwrap_err();
        assert!(err.to_string().contains("gird") && err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn profile_block_parses() {
        let cfg = RunConfig::from_json(
            r#"{"mode": "picard", "domain": {"kind": "ellipsoid", "semi_axes": [2, 1, 1]},
                "initial": {"profile": {"kind": "isotropic", "value": 0.1, "v_max": 0.5}, "delta0": 0.05, "particles": 10}}"#,
        )
        .unwrap();
        assert_eq!(cfg.initial.particles, 10);
        assert_eq!(cfg.initial.data.delta0, Some(0.05));
        cfg.validate().unwrap();
    }
}
