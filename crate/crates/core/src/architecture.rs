//! Observer-architecture design: static targets sampled on zero-velocity
//! surfaces and consolidated by k-means, the six-factor composite cost, and
//! optimization over orbit selections and per-orbit satellite counts.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, RwLock};

use log::warn;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cr3bp::{self, SystemConstants};
use crate::optimize::{self, Dimension, DesignSpace, OptimizationResult, OptimizerConfig, Trial, Value};
use crate::orbits::{OrbitEphemeris, OrbitLibrary};
use crate::photometry::{self, RadiometryConstants, SphereTarget, SunModel, VisibilityPolicy};

pub const ORBITS_PER_ARCHITECTURE: usize = 10;
pub const MAX_SATELLITES_PER_ORBIT: usize = 10;

#[derive(Debug, Error)]
pub enum ArchitectureError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no zero-velocity surface hits for any Jacobi constant")]
    NoSamples,
    #[error(transparent)]
    Dynamics(#[from] cr3bp::Cr3bpError),
    #[error(transparent)]
    Orbit(#[from] crate::orbits::OrbitError),
    #[error(transparent)]
    Photometry(#[from] photometry::PhotometryError),
    #[error(transparent)]
    Optimize(#[from] optimize::OptimizeError),
}

pub type Result<T> = std::result::Result<T, ArchitectureError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticTargetSet {
    pub points: Vec<Vector3<f64>>,
    pub jc_sources: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSampling {
    pub azimuth_rays: usize,
    pub polar_rays: usize,
}

impl Default for TargetSampling {
    fn default() -> Self {
        Self {
            azimuth_rays: 12,
            polar_rays: 6,
        }
    }
}

/// Jacobi constants spaced uniformly over `[lo, hi]`.
pub fn jc_range(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Raw zero-velocity-surface samples on an equiangular ray grid from the barycenter.
pub fn sample_zvs(jc_list: &[f64], sampling: &TargetSampling, c: &SystemConstants) -> Result<Vec<(f64, Vector3<f64>)>> {
    let mut out = Vec::new();
    for &jc in jc_list {
        let before = out.len();
        for ip in 0..sampling.polar_rays {
            let polar = (ip as f64 + 0.5) * PI / sampling.polar_rays as f64;
            for ia in 0..sampling.azimuth_rays {
                let az = ia as f64 * 2.0 * PI / sampling.azimuth_rays as f64;
                let dir = Vector3::new(polar.sin() * az.cos(), polar.sin() * az.sin(), polar.cos());
                if let Some(rho) = cr3bp::zvs_radius(&dir, jc, c)? {
                    out.push((jc, dir * rho));
                }
            }
        }
        if out.len() == before {
            warn!("Jacobi constant {jc} has no zero-velocity surface hits; skipped");
        }
    }
    Ok(out)
}

/// Lloyd's k-means with k-means++ seeding. Returns the centroids.
pub fn kmeans(points: &[Vector3<f64>], k: usize, max_iter: usize, tol: f64, seed: u64) -> Result<Vec<Vector3<f64>>> {
    if k == 0 || k > points.len() {
        return Err(ArchitectureError::InvalidArgument(format!(
            "k = {k} must be in [1, {}]",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| (p - centroids[0]).norm_squared()).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = d2.iter().rposition(|d| *d > 0.0).unwrap_or(0);
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if *d > 0.0 && u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[next]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm_squared());
        }
    }
    let nearest = |p: &Vector3<f64>, cs: &[Vector3<f64>]| -> usize {
        let mut best = (f64::INFINITY, 0);
        for (j, c) in cs.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < best.0 {
                best = (d, j);
            }
        }
        best.1
    };
    for _ in 0..max_iter {
        let mut sums = vec![Vector3::zeros(); k];
        let mut counts = vec![0usize; k];
        for p in points {
            let j = nearest(p, &centroids);
            sums[j] += p;
            counts[j] += 1;
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] > 0 {
                let c = sums[j] / counts[j] as f64;
                shift = shift.max((c - centroids[j]).norm());
                centroids[j] = c;
            }
        }
        if shift <= tol {
            break;
        }
    }
    Ok(centroids)
}

/// Sample every Jacobi constant's zero-velocity surface, pool, and cluster into `k` targets.
pub fn generate_static_targets(
    jc_list: &[f64],
    sampling: &TargetSampling,
    k: usize,
    seed: u64,
    c: &SystemConstants,
) -> Result<StaticTargetSet> {
    if jc_list.is_empty() {
        return Err(ArchitectureError::InvalidArgument("empty Jacobi constant list".into()));
    }
    let samples = sample_zvs(jc_list, sampling, c)?;
    if samples.is_empty() {
        return Err(ArchitectureError::NoSamples);
    }
    let pts: Vec<Vector3<f64>> = samples.iter().map(|s| s.1).collect();
    let mut jc_sources: Vec<f64> = samples.iter().map(|s| s.0).collect();
    jc_sources.dedup();
    Ok(StaticTargetSet {
        points: kmeans(&pts, k, 50, 1e-10, seed)?,
        jc_sources,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub orbit_indices: Vec<usize>,
    pub counts: Vec<usize>,
}

impl Architecture {
    pub fn validate(&self, library_len: usize) -> Result<()> {
        if self.orbit_indices.len() != ORBITS_PER_ARCHITECTURE || self.counts.len() != ORBITS_PER_ARCHITECTURE {
            return Err(ArchitectureError::InvalidArgument(format!(
                "architecture needs exactly {ORBITS_PER_ARCHITECTURE} orbits and counts"
            )));
        }
        if let Some(i) = self.orbit_indices.iter().find(|i| **i >= library_len) {
            return Err(ArchitectureError::InvalidArgument(format!(
                "orbit index {i} outside library of {library_len}"
            )));
        }
        if let Some(n) = self.counts.iter().find(|n| !(1..=MAX_SATELLITES_PER_ORBIT).contains(*n)) {
            return Err(ArchitectureError::InvalidArgument(format!("satellite count {n} outside [1, 10]")));
        }
        Ok(())
    }

    pub fn total_satellites(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn is_unique(&self) -> bool {
        let mut v = self.orbit_indices.clone();
        v.sort_unstable();
        v.windows(2).all(|w| w[0] != w[1])
    }

    /// Design-space encoding: 10 categorical orbit choices then 10 integer counts.
    pub fn from_point(point: &[Value]) -> Self {
        let (o, n) = point.split_at(ORBITS_PER_ARCHITECTURE);
        Self {
            orbit_indices: o.iter().map(|v| v.category().expect("categorical orbit")).collect(),
            counts: n.iter().map(|v| v.integer().expect("integer count") as usize).collect(),
        }
    }
}

pub fn design_space(library_len: usize) -> Result<DesignSpace> {
    let mut dims = vec![Dimension::Categorical { choices: library_len }; ORBITS_PER_ARCHITECTURE];
    dims.extend(std::iter::repeat_n(Dimension::Integer { low: 1, high: MAX_SATELLITES_PER_ORBIT as i64 }, ORBITS_PER_ARCHITECTURE));
    Ok(DesignSpace::new(dims)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
    pub j: f64,
    /// Set when an orbit in the architecture could not be propagated.
    pub failed: bool,
}

impl CostBreakdown {
    fn zero_failed() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
            lambda6: 0.0,
            j: 0.0,
            failed: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationGrid {
    pub horizon_days: f64,
    pub step_hours: f64,
}

impl Default for ObservationGrid {
    fn default() -> Self {
        Self {
            horizon_days: 30.0,
            step_hours: 1.0,
        }
    }
}

impl ObservationGrid {
    pub fn n_steps(&self) -> usize {
        (self.horizon_days * 24.0 / self.step_hours + 1e-9).floor() as usize + 1
    }

    /// Nondimensional grid times, starting at 0.
    pub fn times(&self, c: &SystemConstants) -> Vec<f64> {
        (0..self.n_steps())
            .map(|k| c.seconds_to_nd(k as f64 * self.step_hours * 3600.0))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon_days >= 0.0 && self.step_hours > 0.0) {
            return Err(ArchitectureError::InvalidArgument(format!("bad observation grid {self:?}")));
        }
        Ok(())
    }
}

/// Observability of all targets from one satellite slot (an orbit at a phase
/// fraction) across the grid.
#[derive(Debug, Clone)]
struct SlotStats {
    /// Visible-epoch count per target.
    per_target: Vec<u32>,
    total_visible: u64,
    distance_sum: f64,
}

/// Scoring context with per-slot caching; evaluation is pure, so cached and
/// uncached results are identical.
pub struct CostEvaluator<'a> {
    library: &'a OrbitLibrary,
    targets: &'a StaticTargetSet,
    times: Vec<f64>,
    sun: Vec<Vector3<f64>>,
    policy: VisibilityPolicy,
    sphere: SphereTarget,
    radiometry: RadiometryConstants,
    constants: SystemConstants,
    tol: f64,
    ephemerides: RwLock<HashMap<usize, Option<Arc<OrbitEphemeris>>>>,
    slots: RwLock<HashMap<SlotKey, Option<Arc<SlotStats>>>>,
}

/// (orbit index, satellite index, satellites on the orbit).
type SlotKey = (usize, usize, usize);

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl<'a> CostEvaluator<'a> {
    pub fn new(
        library: &'a OrbitLibrary,
        targets: &'a StaticTargetSet,
        grid: &ObservationGrid,
        policy: &VisibilityPolicy,
        sun: &SunModel,
        constants: &SystemConstants,
    ) -> Result<Self> {
        grid.validate()?;
        policy.validate()?;
        if targets.points.is_empty() {
            return Err(ArchitectureError::InvalidArgument("no static targets".into()));
        }
        let times = grid.times(constants);
        let sun = times.iter().map(|t| sun.position(*t, constants)).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            library,
            targets,
            times,
            sun,
            policy: *policy,
            sphere: SphereTarget::default(),
            radiometry: RadiometryConstants::default(),
            constants: *constants,
            tol: 1e-10,
            ephemerides: RwLock::new(HashMap::new()),
            slots: RwLock::new(HashMap::new()),
        })
    }

    pub fn n_steps(&self) -> usize {
        self.times.len()
    }

    fn ephemeris(&self, idx: usize) -> Option<Arc<OrbitEphemeris>> {
        if let Some(e) = self.ephemerides.read().expect("lock").get(&idx) {
            return e.clone();
        }
        let built = match OrbitEphemeris::new(&self.library.orbits[idx], self.tol, &self.constants) {
            Ok(e) => Some(Arc::new(e)),
            Err(e) => {
                warn!("orbit {idx} could not be propagated: {e}");
                None
            }
        };
        self.ephemerides.write().expect("lock").entry(idx).or_insert(built).clone()
    }

    fn slot(&self, idx: usize, j: usize, n: usize) -> Option<Arc<SlotStats>> {
        let g = gcd(j, n).max(1);
        let key = (idx, j / g, n / g);
        if let Some(s) = self.slots.read().expect("lock").get(&key) {
            return s.clone();
        }
        let stats = self.ephemeris(idx).map(|eph| Arc::new(self.compute_slot(&eph, key.1, key.2)));
        self.slots.write().expect("lock").entry(key).or_insert(stats).clone()
    }

    fn compute_slot(&self, eph: &OrbitEphemeris, j: usize, n: usize) -> SlotStats {
        let offset = eph.period * j as f64 / n as f64;
        let earth = self.constants.earth();
        let moon = self.constants.moon();
        let n_targets = self.targets.points.len();
        let rows: Vec<(Vec<bool>, f64)> = self
            .times
            .par_iter()
            .zip(&self.sun)
            .map(|(t, sun)| {
                let obs = eph.state_at(t + offset).position();
                let dist = (obs - moon).norm() + (obs - earth).norm();
                let vis = self
                    .targets
                    .points
                    .iter()
                    .map(|p| {
                        let r_ot = p - obs;
                        let mag = photometry::sphere_magnitude(&self.sphere, &r_ot, &(p - sun), &self.radiometry, &self.constants);
                        photometry::visibility_check(mag, &r_ot, sun, &moon, &earth, &obs, &self.policy).is_visible()
                    })
                    .collect();
                (vis, dist)
            })
            .collect();
        let mut per_target = vec![0u32; n_targets];
        let mut distance_sum = 0.0;
        for (vis, d) in &rows {
            for (c, v) in per_target.iter_mut().zip(vis) {
                *c += *v as u32;
            }
            distance_sum += d;
        }
        SlotStats {
            total_visible: per_target.iter().map(|c| *c as u64).sum(),
            per_target,
            distance_sum,
        }
    }

    /// Composite cost of one architecture.
    pub fn evaluate(&self, arch: &Architecture) -> Result<CostBreakdown> {
        arch.validate(self.library.len())?;
        let n_targets = self.targets.points.len();
        let norm = (n_targets * self.n_steps()) as f64;
        let total_sats = arch.total_satellites() as f64;
        let lambda1 = 1.0 / total_sats;
        let weighted: f64 = arch
            .orbit_indices
            .iter()
            .zip(&arch.counts)
            .map(|(i, n)| *n as f64 * self.library.orbits[*i].stability_index)
            .sum();
        let lambda2 = 1.0 / weighted;
        let mut visible = 0u64;
        let mut distance = 0.0;
        let mut per_target_rate = vec![0.0f64; n_targets];
        for (&idx, &n) in arch.orbit_indices.iter().zip(&arch.counts) {
            let mut orbit_counts = vec![0u64; n_targets];
            for j in 0..n {
                let Some(s) = self.slot(idx, j, n) else {
                    return Ok(CostBreakdown::zero_failed());
                };
                visible += s.total_visible;
                distance += s.distance_sum;
                for (o, c) in orbit_counts.iter_mut().zip(&s.per_target) {
                    *o += *c as u64;
                }
            }
            for (r, c) in per_target_rate.iter_mut().zip(&orbit_counts) {
                *r += *c as f64 / n as f64;
            }
        }
        let lambda3 = visible as f64 / norm;
        let lambda4 = per_target_rate
            .iter()
            .map(|r| if *r == 0.0 { 0.0 } else { r.log10() })
            .sum::<f64>()
            / norm;
        let lambda5 = norm / distance;
        let lambda6 = if arch.is_unique() { 1.0 } else { 0.0 };
        let j = (lambda1 * lambda2 * lambda3 * lambda4 * lambda5 * lambda6).abs();
        Ok(CostBreakdown {
            lambda1,
            lambda2,
            lambda3,
            lambda4,
            lambda5,
            lambda6,
            j,
            failed: false,
        })
    }

    /// Observer positions of one architecture at every grid time.
    pub fn observer_positions(&self, arch: &Architecture) -> Result<Vec<Vec<Vector3<f64>>>> {
        arch.validate(self.library.len())?;
        let mut out = Vec::new();
        for (&idx, &n) in arch.orbit_indices.iter().zip(&arch.counts) {
            let eph = self
                .ephemeris(idx)
                .ok_or_else(|| ArchitectureError::InvalidArgument(format!("orbit {idx} failed to propagate")))?;
            for j in 0..n {
                let offset = eph.period * j as f64 / n as f64;
                out.push(self.times.iter().map(|t| eph.state_at(t + offset).position()).collect());
            }
        }
        Ok(out)
    }
}

/// One-shot evaluation without a shared cache.
pub fn cost_components(
    arch: &Architecture,
    library: &OrbitLibrary,
    targets: &StaticTargetSet,
    grid: &ObservationGrid,
    policy: &VisibilityPolicy,
    sun: &SunModel,
    constants: &SystemConstants,
) -> Result<CostBreakdown> {
    CostEvaluator::new(library, targets, grid, policy, sun, constants)?.evaluate(arch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureResult {
    pub algorithm: optimize::Algorithm,
    pub best: Option<Architecture>,
    pub best_cost: Option<CostBreakdown>,
    pub history: Vec<Trial>,
    /// Cost breakdown per trial, aligned with `history`.
    pub trace: Vec<CostBreakdown>,
}

impl ArchitectureResult {
    pub fn best_j(&self) -> f64 {
        self.best_cost.map_or(0.0, |c| c.j)
    }
}

/// Optimize the architecture; the reward is J (or −J when `minimize`).
pub fn optimize_architecture(evaluator: &CostEvaluator<'_>, cfg: &OptimizerConfig, minimize: bool) -> Result<ArchitectureResult> {
    let lib_len = evaluator.library.len();
    if lib_len < ORBITS_PER_ARCHITECTURE {
        return Err(ArchitectureError::InvalidArgument(format!(
            "library has {lib_len} orbits; at least {ORBITS_PER_ARCHITECTURE} required"
        )));
    }
    let space = design_space(lib_len)?;
    let mut trace = Vec::new();
    let OptimizationResult { best, history } = optimize::optimize(
        &space,
        |p| {
            let cost = evaluator.evaluate(&Architecture::from_point(p));
            if let Ok(c) = &cost {
                trace.push(*c);
            }
            cost.map(|c| if minimize { -c.j } else { c.j })
        },
        cfg,
    )?;
    let best_arch = best.as_ref().map(|t| Architecture::from_point(&t.point));
    let best_cost = match &best_arch {
        Some(a) => Some(evaluator.evaluate(a)?),
        None => None,
    };
    Ok(ArchitectureResult {
        algorithm: cfg.algorithm,
        best: best_arch,
        best_cost,
        history,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orbits::{Family, FamilyPlan, OrbitLibrary};
    use approx::assert_relative_eq;

    fn consts() -> SystemConstants {
        SystemConstants::default()
    }

    fn small_library() -> OrbitLibrary {
        let seeds: Vec<_> = crate::orbits::bundled_seeds()
            .into_iter()
            .filter(|s| s.family.is_observer_family())
            .collect();
        OrbitLibrary::build(
            &seeds,
            |f: Family| Some(FamilyPlan::with_count(f, 1)),
            "test",
            &consts(),
            &Default::default(),
        )
        .0
    }

    fn targets(c: &SystemConstants) -> StaticTargetSet {
        generate_static_targets(&jc_range(2.91, 3.2, 3), &TargetSampling::default(), 20, 1, c).unwrap()
    }

    #[test]
    fn grid_includes_both_ends() {
        assert_eq!(ObservationGrid::default().n_steps(), 721);
        let g = ObservationGrid { horizon_days: 1.0, step_hours: 1.0 };
        assert_eq!(g.n_steps(), 25);
        let t = g.times(&consts());
        assert_eq!(t[0], 0.0);
        assert_relative_eq!(consts().nd_to_seconds(t[24]), 86_400.0, max_relative = 1e-12);
    }

    #[test]
    fn zvs_samples_lie_on_their_surface() {
        let c = consts();
        let samples = sample_zvs(&jc_range(2.91, 5.49, 10), &TargetSampling::default(), &c).unwrap();
        assert!(samples.len() > 100);
        for (jc, p) in &samples {
            let u = cr3bp::pseudo_potential(p, c.mu).unwrap();
            assert!((2.0 * u - jc).abs() <= 1e-10);
        }
    }

    #[test]
    fn kmeans_with_k_equal_n_returns_samples() {
        let pts: Vec<Vector3<f64>> = (0..8).map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.1, 0.0)).collect();
        let mut cs = kmeans(&pts, 8, 50, 1e-10, 3).unwrap();
        cs.sort_by(|a, b| a.x.total_cmp(&b.x));
        for (a, b) in cs.iter().zip(&pts) {
            assert_eq!(a, b);
        }
        assert!(kmeans(&pts, 9, 50, 1e-10, 3).is_err());
    }

    #[test]
    fn kmeans_recovers_separated_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<Vector3<f64>> = (0..50).map(|_| Vector3::new(rng.gen::<f64>(), rng.gen(), rng.gen())).collect();
        let b: Vec<Vector3<f64>> = (0..30).map(|_| Vector3::new(rng.gen::<f64>() + 100.0, rng.gen(), rng.gen())).collect();
        let mean = |v: &[Vector3<f64>]| v.iter().sum::<Vector3<f64>>() / v.len() as f64;
        let all: Vec<_> = a.iter().chain(&b).copied().collect();
        let mut cs = kmeans(&all, 2, 50, 1e-10, 11).unwrap();
        cs.sort_by(|x, y| x.x.total_cmp(&y.x));
        assert!((cs[0] - mean(&a)).norm() < 1e-9);
        assert!((cs[1] - mean(&b)).norm() < 1e-9);
    }

    #[test]
    fn centroids_lie_inside_sample_hull() {
        let c = consts();
        let jcs = jc_range(2.91, 5.49, 10);
        let samples = sample_zvs(&jcs, &TargetSampling::default(), &c).unwrap();
        let set = generate_static_targets(&jcs, &TargetSampling::default(), 100, 2, &c).unwrap();
        assert_eq!(set.points.len(), 100);
        // A point outside the hull is separated by some direction; check a dense direction fan.
        for ia in 0..24 {
            for ip in 0..12 {
                let (az, po) = (ia as f64 * PI / 12.0, (ip as f64 + 0.5) * PI / 12.0);
                let d = Vector3::new(po.sin() * az.cos(), po.sin() * az.sin(), po.cos());
                let max_s = samples.iter().map(|s| s.1.dot(&d)).fold(f64::MIN, f64::max);
                for p in &set.points {
                    assert!(p.dot(&d) <= max_s + 1e-12);
                }
            }
        }
    }

    #[test]
    fn cost_structure() {
        let c = consts();
        let lib = small_library();
        assert!(lib.len() >= 10);
        let tg = targets(&c);
        let grid = ObservationGrid { horizon_days: 1.0, step_hours: 2.0 };
        let ev = CostEvaluator::new(&lib, &tg, &grid, &VisibilityPolicy::default(), &SunModel::default(), &c).unwrap();
        let arch = Architecture { orbit_indices: (0..10).collect(), counts: vec![1; 10] };
        let cost = ev.evaluate(&arch).unwrap();
        assert_eq!(cost.lambda1, 0.1);
        assert_eq!(cost.lambda6, 1.0);
        assert!(cost.lambda3 > 0.0 && cost.j > 0.0);
        let expected = (cost.lambda1 * cost.lambda2 * cost.lambda3 * cost.lambda4 * cost.lambda5 * cost.lambda6).abs();
        assert_eq!(cost.j, expected);

        let mut dup = arch.clone();
        dup.orbit_indices[3] = dup.orbit_indices[4];
        let d = ev.evaluate(&dup).unwrap();
        assert_eq!((d.lambda6, d.j), (0.0, 0.0));

        // More satellites on one orbit strictly lowers λ1 and λ2.
        let mut more = arch.clone();
        more.counts[2] = 4;
        let m = ev.evaluate(&more).unwrap();
        assert!(m.lambda1 < cost.lambda1 && m.lambda2 < cost.lambda2);

        // Cached and one-shot evaluations agree bit for bit.
        let fresh = cost_components(&more, &lib, &tg, &grid, &VisibilityPolicy::default(), &SunModel::default(), &c).unwrap();
        assert_eq!(fresh, m);
    }

    #[test]
    fn no_visibility_gives_zero_cost() {
        let c = consts();
        let lib = small_library();
        let tg = targets(&c);
        let grid = ObservationGrid { horizon_days: 0.5, step_hours: 3.0 };
        let blind = VisibilityPolicy { mag_threshold: -100.0, ..Default::default() };
        let ev = CostEvaluator::new(&lib, &tg, &grid, &blind, &SunModel::default(), &c).unwrap();
        let cost = ev.evaluate(&Architecture { orbit_indices: (0..10).collect(), counts: vec![2; 10] }).unwrap();
        assert_eq!(cost.lambda3, 0.0);
        assert_eq!(cost.lambda4, 0.0);
        assert_eq!(cost.j, 0.0);
    }

    #[test]
    fn observer_positions_keep_orbit_energy() {
        let c = consts();
        let lib = small_library();
        let tg = targets(&c);
        let grid = ObservationGrid { horizon_days: 30.0, step_hours: 24.0 };
        let ev = CostEvaluator::new(&lib, &tg, &grid, &VisibilityPolicy::default(), &SunModel::default(), &c).unwrap();
        let arch = Architecture { orbit_indices: (0..10).collect(), counts: vec![3; 10] };
        let pos = ev.observer_positions(&arch).unwrap();
        assert_eq!(pos.len(), 30);
        for (k, &idx) in arch.orbit_indices.iter().enumerate() {
            let orbit = &lib.orbits[idx];
            let eph = OrbitEphemeris::new(orbit, 1e-10, &c).unwrap();
            for t in grid.times(&c) {
                for j in 0..3 {
                    let s = eph.state_at(t + orbit.period * j as f64 / 3.0);
                    let jc = cr3bp::jacobi_constant(&s, &c).unwrap();
                    assert!((jc - orbit.jc).abs() <= 1e-8, "orbit {k}: {}", jc - orbit.jc);
                }
            }
        }
    }

    #[test]
    fn forced_orbit_choice_optimizes_counts() {
        let c = consts();
        let lib = small_library();
        let ten = OrbitLibrary { orbits: lib.orbits[..10].to_vec(), provenance: "ten".into() };
        let tg = targets(&c);
        let grid = ObservationGrid { horizon_days: 0.5, step_hours: 6.0 };
        let ev = CostEvaluator::new(&ten, &tg, &grid, &VisibilityPolicy::default(), &SunModel::default(), &c).unwrap();
        let cfg = OptimizerConfig { max_evals: 40, ..Default::default() };
        let res = optimize_architecture(&ev, &cfg, false).unwrap();
        assert_eq!(res.history.len(), 40);
        assert_eq!(res.trace.len(), 40);
        let best = res.best.clone().unwrap();
        assert_eq!(res.best_j(), ev.evaluate(&best).unwrap().j);
        let max = res.history.iter().map(|t| t.reward).fold(f64::MIN, f64::max);
        assert_eq!(res.best_j(), max);
    }
}
