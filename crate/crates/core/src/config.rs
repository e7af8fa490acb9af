//! TOML run configuration with unit-bearing keys, and the desk-scale presets
//! it defaults to.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::architecture::{jc_range, ObservationGrid, StaticTargetSet, TargetSampling};
use crate::cr3bp::SystemConstants;
use crate::optimize::{Algorithm, OptimizerConfig};
use crate::orbits::{
    bundled_seeds, read_seeds, CorrectorSettings, Family, FamilyPlan, LibraryBuildReport, OrbitLibrary, OrbitSeed,
    PeriodicOrbit,
};
use crate::photometry::{SunModel, VisibilityPolicy};
use crate::tasking::{
    AttitudeSettings, InitialUncertainty, MeasurementNoise, ObserverSpec, ProcessNoise, Scenario2Config,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error")]
    Parse(#[from] toml::de::Error),
    #[error("config serialization error")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantsConfig {
    pub mu: f64,
    pub length_unit_km: f64,
    pub time_unit_s: f64,
    /// Initial rotating-frame Sun longitude for the analytic model.
    pub sun_theta0_deg: f64,
    /// Optional `jd,x,y,z` table overriding the analytic Sun.
    pub sun_table: Option<PathBuf>,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        let c = SystemConstants::default();
        Self {
            mu: c.mu,
            length_unit_km: c.l_star,
            time_unit_s: c.t_star,
            sun_theta0_deg: 0.0,
            sun_table: None,
        }
    }
}

impl ConstantsConfig {
    pub fn system(&self) -> SystemConstants {
        SystemConstants {
            mu: self.mu,
            l_star: self.length_unit_km,
            t_star: self.time_unit_s,
        }
    }

    pub fn sun(&self) -> Result<SunModel> {
        match &self.sun_table {
            None => Ok(SunModel::Analytic {
                theta0: self.sun_theta0_deg * PI / 180.0,
            }),
            Some(p) => {
                let f = std::fs::File::open(p).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
                SunModel::read_table(f).map_err(|e| ConfigError::Invalid(format!("sun table {}: {e}", p.display())))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyEntry {
    pub family: Family,
    pub count: usize,
    /// Continuation step in x0; the family default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
}

impl FamilyEntry {
    pub fn new(family: Family, count: usize) -> Self {
        Self { family, count, step: None }
    }
}

/// Observer families, two members each, plus a third member for the
/// collinear Lyapunov and northern L1/L2 halo families: 30 orbits.
pub fn desk_library_families() -> Vec<FamilyEntry> {
    Family::ALL
        .iter()
        .filter(|f| f.is_observer_family())
        .map(|&f| {
            let extra = matches!(
                f,
                Family::L1Lyapunov | Family::L2Lyapunov | Family::L1HaloNorth | Family::L2HaloNorth
            );
            FamilyEntry::new(f, if extra { 3 } else { 2 })
        })
        .collect()
}

pub const DESK_TARGET_FAMILIES: [Family; 6] = [
    Family::L1HaloNorth,
    Family::L1HaloSouth,
    Family::L2HaloNorth,
    Family::L2HaloSouth,
    Family::Dro,
    Family::Resonant31,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibraryConfig {
    /// Seed CSV; the bundled seeds when absent.
    pub seed_file: Option<PathBuf>,
    /// Library CSV read by the task commands.
    pub path: Option<PathBuf>,
    pub integration_tol: f64,
    pub families: Vec<FamilyEntry>,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        Self {
            seed_file: None,
            path: None,
            integration_tol: CorrectorSettings::default().tol,
            families: desk_library_families(),
        }
    }
}

impl LibraryConfig {
    pub fn seeds(&self) -> Result<Vec<OrbitSeed>> {
        match &self.seed_file {
            None => Ok(bundled_seeds()),
            Some(p) => {
                let f = std::fs::File::open(p).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
                read_seeds(f).map_err(|e| ConfigError::Invalid(format!("seed file {}: {e}", p.display())))
            }
        }
    }

    pub fn plan(&self, family: Family) -> Option<FamilyPlan> {
        self.families.iter().find(|e| e.family == family).map(|e| FamilyPlan {
            dx: e.step.unwrap_or_else(|| family.default_step()),
            count: e.count,
        })
    }

    pub fn build(&self, seeds: &[OrbitSeed], c: &SystemConstants) -> (OrbitLibrary, LibraryBuildReport) {
        let settings = CorrectorSettings {
            tol: self.integration_tol,
            ..Default::default()
        };
        OrbitLibrary::build(seeds, |f| self.plan(f), "corrected and continued from seeds", c, &settings)
    }

    /// Sum of requested members.
    pub fn requested(&self) -> usize {
        self.families.iter().map(|e| e.count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetsConfig {
    pub jc_list: Vec<f64>,
    pub k: usize,
    pub sampling: TargetSampling,
    pub seed: u64,
}

impl Default for TargetsConfig {
    fn default() -> Self {
        Self {
            jc_list: jc_range(2.91, 5.49, 10),
            k: 100,
            sampling: TargetSampling::default(),
            seed: 0,
        }
    }
}

impl TargetsConfig {
    pub fn generate(&self, c: &SystemConstants) -> Result<StaticTargetSet> {
        crate::architecture::generate_static_targets(&self.jc_list, &self.sampling, self.k, self.seed, c)
            .map_err(|e| ConfigError::Invalid(format!("static targets: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Task1Config {
    pub targets: TargetsConfig,
    pub grid: ObservationGrid,
    pub policy: VisibilityPolicy,
    pub algorithms: Vec<Algorithm>,
    pub minimize: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for Task1Config {
    fn default() -> Self {
        Self {
            targets: TargetsConfig::default(),
            grid: ObservationGrid {
                horizon_days: 1.0,
                step_hours: 1.0,
            },
            policy: VisibilityPolicy::default(),
            algorithms: vec![Algorithm::Tpe, Algorithm::Random],
            minimize: false,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Task2Config {
    /// Observers drawn from the Task-1 architecture in round-robin order.
    pub n_observers: usize,
    pub n_targets: usize,
    pub target_families: Vec<FamilyEntry>,
    /// One run per interval.
    pub tasking_interval_minutes: Vec<f64>,
    pub step_seconds: u64,
    pub horizon_days: f64,
    pub noise: MeasurementNoise,
    pub process_noise: ProcessNoise,
    pub initial: InitialUncertainty,
    pub attitude: AttitudeSettings,
    pub policy: VisibilityPolicy,
    pub optimizer: OptimizerConfig,
    pub target_radius_m: f64,
    pub mesh_subdivisions: u32,
    pub propagation_tol: f64,
    pub continuous_visibility: bool,
    pub use_magnitude: bool,
}

impl Default for Task2Config {
    fn default() -> Self {
        let base = Scenario2Config::new(Vec::new(), Vec::new());
        Self {
            n_observers: 3,
            n_targets: 3,
            target_families: DESK_TARGET_FAMILIES.iter().map(|&f| FamilyEntry::new(f, 2)).collect(),
            tasking_interval_minutes: vec![30.0],
            step_seconds: base.step_s,
            horizon_days: 1.0,
            noise: base.noise,
            process_noise: base.process_noise,
            initial: base.initial,
            attitude: base.attitude,
            policy: base.policy,
            optimizer: base.tasking_optimizer,
            target_radius_m: base.target_radius_m,
            mesh_subdivisions: base.mesh_subdivisions,
            propagation_tol: base.propagation_tol,
            continuous_visibility: base.continuous_visibility,
            use_magnitude: base.use_magnitude,
        }
    }
}

impl Task2Config {
    pub fn target_library_config(&self) -> LibraryConfig {
        LibraryConfig {
            families: self.target_families.clone(),
            ..Default::default()
        }
    }

    pub fn families(&self) -> Vec<Family> {
        self.target_families.iter().map(|e| e.family).collect()
    }

    pub fn interval_seconds(minutes: f64) -> u64 {
        (minutes * 60.0).round() as u64
    }

    /// Scenario for one tasking interval.
    pub fn scenario(
        &self,
        observers: Vec<ObserverSpec>,
        targets: Vec<PeriodicOrbit>,
        interval_minutes: f64,
        seed: u64,
        constants: SystemConstants,
        sun: SunModel,
    ) -> Scenario2Config {
        Scenario2Config {
            tasking_interval_s: Self::interval_seconds(interval_minutes),
            step_s: self.step_seconds,
            horizon_s: (self.horizon_days * 86_400.0).round() as u64,
            noise: self.noise,
            process_noise: self.process_noise,
            initial: self.initial,
            attitude: self.attitude,
            policy: self.policy,
            tasking_optimizer: OptimizerConfig {
                seed,
                ..self.optimizer
            },
            target_radius_m: self.target_radius_m,
            mesh_subdivisions: self.mesh_subdivisions,
            propagation_tol: self.propagation_tol,
            continuous_visibility: self.continuous_visibility,
            use_magnitude: self.use_magnitude,
            seed,
            sun,
            constants,
            ..Scenario2Config::new(observers, targets)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub constants: ConstantsConfig,
    pub library: LibraryConfig,
    pub task1: Task1Config,
    pub task2: Task2Config,
}


impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.constants;
        if !(c.mu > 0.0 && c.mu < 0.5) {
            return invalid(format!("constants.mu = {} outside (0, 0.5)", c.mu));
        }
        if !(c.length_unit_km > 0.0 && c.time_unit_s > 0.0) {
            return invalid("constants.length_unit_km and constants.time_unit_s must be positive");
        }
        if !(self.library.integration_tol > 0.0) {
            return invalid("library.integration_tol must be positive");
        }
        let t1 = &self.task1;
        if t1.targets.jc_list.is_empty() || t1.targets.k == 0 {
            return invalid("task1.targets needs a nonempty jc_list and k ≥ 1");
        }
        if t1.algorithms.is_empty() {
            return invalid("task1.algorithms is empty");
        }
        t1.grid.validate().map_err(|e| ConfigError::Invalid(format!("task1.grid: {e}")))?;
        t1.policy.validate().map_err(|e| ConfigError::Invalid(format!("task1.policy: {e}")))?;
        t1.optimizer.validate().map_err(|e| ConfigError::Invalid(format!("task1.optimizer: {e}")))?;
        let t2 = &self.task2;
        if t2.n_observers == 0 || t2.n_targets < t2.n_observers {
            return invalid(format!(
                "task2 needs n_observers ≥ 1 and n_targets ≥ n_observers (got {} and {})",
                t2.n_observers, t2.n_targets
            ));
        }
        if t2.tasking_interval_minutes.is_empty() || t2.tasking_interval_minutes.iter().any(|&m| !(m > 0.0)) {
            return invalid("task2.tasking_interval_minutes must hold positive values");
        }
        if t2.step_seconds == 0 || !(t2.horizon_days > 0.0) {
            return invalid("task2.step_seconds and task2.horizon_days must be positive");
        }
        t2.policy.validate().map_err(|e| ConfigError::Invalid(format!("task2.policy: {e}")))?;
        t2.optimizer.validate().map_err(|e| ConfigError::Invalid(format!("task2.optimizer: {e}")))?;
        Ok(())
    }
}

/// Provenance written next to every set of outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub started_unix_s: u64,
    pub wall_clock_s: f64,
    pub outputs: Vec<PathBuf>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, seeds: Vec<u64>) -> Self {
        let started = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            command: command.to_string(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            seeds,
            started_unix_s: started,
            wall_clock_s: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        std::fs::write(&path, text).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_library_requests_thirty_orbits() {
        assert_eq!(LibraryConfig::default().requested(), 30);
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 4\n[task2]\nn_targets = 6\ntasking_interval_minutes = [30, 240]\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.task2.n_targets, 6);
        assert_eq!(cfg.task2.step_seconds, 60);
        assert_eq!(cfg.task1.targets.k, 100);
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let err = RunConfig::from_toml("seed = 1\n\n[task1]\nhorizon = 3\n").unwrap_err();
        let msg = format!("{:#}", anyhow::Error::from(err));
        assert!(msg.contains("horizon") && msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn semantic_errors_are_rejected() {
        let err = RunConfig::from_toml("[task2]\nn_observers = 4\nn_targets = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("task1", &RunConfig::default(), vec![3, 4]);
        m.outputs.push(dir.path().join("summary.json"));
        m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(dir.path()).unwrap(), m);
    }

    #[test]
    fn interval_minutes_convert_to_seconds() {
        assert_eq!(Task2Config::interval_seconds(30.0), 1800);
        assert_eq!(Task2Config::interval_seconds(240.0), 14_400);
    }
}
