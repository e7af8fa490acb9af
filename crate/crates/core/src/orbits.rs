//! Periodic-orbit families: single-shooting correction at perpendicular
//! x-axis crossings, natural-parameter continuation in x0, monodromy-based
//! stability and equal-phase satellite placement.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use log::{info, warn};
use nalgebra::{Matrix2, Matrix6, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cr3bp::{
    self, augmented_rhs, jacobi_constant, pack_augmented, unpack_augmented, Augmented,
    Cr3bpError, CrState, SystemConstants, Trajectory,
};
use crate::integrate::{self, locate_root, StepperOptions};

#[derive(Debug, Error)]
pub enum OrbitError {
    #[error("seed must lie on the x-axis crossing plane (y = {0:e})")]
    SeedOffPlane(f64),
    #[error("corrector did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("x-axis crossing not found: {0}")]
    CrossingNotFound(String),
    #[error("closure error {0:e} exceeds tolerance")]
    ClosureFailed(f64),
    #[error("eigenvalue computation failed")]
    EigenFailure,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown family tag '{0}'")]
    UnknownFamily(String),
    #[error(transparent)]
    Dynamics(#[from] Cr3bpError),
    #[error("seed/library file: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OrbitError>;

/// The thirteen observer families plus the planar target families used for tasking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    L1Lyapunov,
    L2Lyapunov,
    L3Lyapunov,
    L1HaloNorth,
    L1HaloSouth,
    L2HaloNorth,
    L2HaloSouth,
    L3HaloNorth,
    L3HaloSouth,
    ButterflyNorth,
    ButterflySouth,
    DragonflyNorth,
    DragonflySouth,
    Dro,
    #[serde(rename = "resonant_3_1")]
    Resonant31,
}

impl Family {
    pub const ALL: [Family; 15] = [
        Family::L1Lyapunov,
        Family::L2Lyapunov,
        Family::L3Lyapunov,
        Family::L1HaloNorth,
        Family::L1HaloSouth,
        Family::L2HaloNorth,
        Family::L2HaloSouth,
        Family::L3HaloNorth,
        Family::L3HaloSouth,
        Family::ButterflyNorth,
        Family::ButterflySouth,
        Family::DragonflyNorth,
        Family::DragonflySouth,
        Family::Dro,
        Family::Resonant31,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Family::L1Lyapunov => "l1_lyapunov",
            Family::L2Lyapunov => "l2_lyapunov",
            Family::L3Lyapunov => "l3_lyapunov",
            Family::L1HaloNorth => "l1_halo_north",
            Family::L1HaloSouth => "l1_halo_south",
            Family::L2HaloNorth => "l2_halo_north",
            Family::L2HaloSouth => "l2_halo_south",
            Family::L3HaloNorth => "l3_halo_north",
            Family::L3HaloSouth => "l3_halo_south",
            Family::ButterflyNorth => "butterfly_north",
            Family::ButterflySouth => "butterfly_south",
            Family::DragonflyNorth => "dragonfly_north",
            Family::DragonflySouth => "dragonfly_south",
            Family::Dro => "dro",
            Family::Resonant31 => "resonant_3_1",
        }
    }

    pub fn is_planar(self) -> bool {
        matches!(
            self,
            Family::L1Lyapunov
                | Family::L2Lyapunov
                | Family::L3Lyapunov
                | Family::Dro
                | Family::Resonant31
        )
    }

    /// Families considered as observer trajectories for architecture design.
    pub fn is_observer_family(self) -> bool {
        !matches!(self, Family::Dro | Family::Resonant31)
    }

    /// Default continuation step in x0 (nondimensional).
    pub fn default_step(self) -> f64 {
        match self {
            Family::L1Lyapunov => -0.01,
            Family::L2Lyapunov => -0.01,
            Family::L3Lyapunov => -0.03,
            Family::L1HaloNorth | Family::L1HaloSouth => 0.004,
            Family::L2HaloNorth | Family::L2HaloSouth => 0.005,
            Family::L3HaloNorth | Family::L3HaloSouth => 0.02,
            Family::ButterflyNorth | Family::ButterflySouth => -0.005,
            Family::DragonflyNorth | Family::DragonflySouth => -0.0013,
            Family::Dro => 0.01,
            Family::Resonant31 => 0.005,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Family {
    type Err = OrbitError;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.tag() == s.trim())
            .ok_or_else(|| OrbitError::UnknownFamily(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodicOrbit {
    pub family: Family,
    /// Perpendicular x-axis crossing (y = vx = vz = 0).
    pub ic: CrState,
    pub period: f64,
    pub stability_index: f64,
    pub jc: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CorrectorSettings {
    /// Integration tolerance used inside the corrector.
    pub tol: f64,
    pub max_iterations: usize,
    pub residual_tol: f64,
    pub closure_tol: f64,
}

impl Default for CorrectorSettings {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iterations: 50,
            residual_tol: 1e-10,
            closure_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CorrectionReport {
    pub iterations: usize,
    pub residual: f64,
    pub closure: f64,
}

/// Times (> t0) at which the trajectory crosses y = 0 within `t_limit`.
fn crossing_times(
    seed: &CrState,
    t_limit: f64,
    tol: f64,
    c: &SystemConstants,
) -> Result<Vec<f64>> {
    let tr = cr3bp::propagate(seed, 0.0, t_limit, tol, c)?;
    let mut times = Vec::new();
    for seg in tr.solution().segments() {
        let t_end = seg.t + seg.h;
        let ya = seg.start_state()[1];
        let yb = seg.eval(t_end)[1];
        if (ya < 0.0 && yb >= 0.0) || (ya > 0.0 && yb <= 0.0) {
            times.push(locate_root(seg, t_end, |_, y| y[1]));
        }
    }
    Ok(times)
}

/// Index (1-based) of the y = 0 crossing closest to half of `period_guess`.
fn half_crossing_index(
    ic: &CrState,
    period_guess: f64,
    tol: f64,
    c: &SystemConstants,
) -> Result<usize> {
    let half = 0.5 * period_guess;
    let limit = 0.8 * period_guess;
    crossing_times(ic, limit, tol, c)?
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - half).abs().total_cmp(&(b.1 - half).abs()))
        .map(|(i, _)| i + 1)
        .ok_or_else(|| OrbitError::CrossingNotFound(format!("no y = 0 crossing before t = {limit}")))
}

/// Propagate state + STM to the `k`-th y = 0 crossing. Returns (t, state, phi).
fn propagate_to_crossing(
    seed: &CrState,
    k: usize,
    t_limit: f64,
    tol: f64,
    c: &SystemConstants,
) -> Result<(f64, CrState, Matrix6<f64>)> {
    let mu = c.mu;
    let opts = StepperOptions::new(tol);
    let y0 = pack_augmented(seed, &Matrix6::identity());
    let rhs = |_t: f64, y: &Augmented| augmented_rhs(y, mu);
    let (_, bracket) = integrate::integrate_to_event(
        rhs,
        0.0,
        y0,
        t_limit,
        &opts,
        |_t: f64, y: &Augmented| y[1],
        k,
    )
    .map_err(|e| match e {
        Cr3bpError::Integration(integrate::StepFailure::EventNotFound { t }) => {
            OrbitError::CrossingNotFound(format!("crossing {k} not reached by t = {t}"))
        }
        other => other.into(),
    })?;
    let mut t = locate_root(&bracket.segment, bracket.t_end, |_, y| y[1]);
    let sparse = opts.sparse();
    let start = bracket.segment.start_state();
    let mut y = integrate::integrate(rhs, bracket.segment.t, start, t, &sparse)?.yf;
    // Polish the crossing time with Newton steps on y(t) = 0.
    for _ in 0..3 {
        if y[1] == 0.0 || y[4] == 0.0 {
            break;
        }
        let dt = -y[1] / y[4];
        if dt.abs() < 1e-16 {
            break;
        }
        y = integrate::integrate(rhs, t, y, t + dt, &sparse)?.yf;
        t += dt;
    }
    let (s, phi) = unpack_augmented(&y);
    Ok((t, s, phi))
}

fn closure_error(ic: &CrState, period: f64, tol: f64, c: &SystemConstants) -> Result<f64> {
    let end = cr3bp::propagate_final(ic, 0.0, period, tol, c)?;
    Ok((end.to_vector() - ic.to_vector()).amax())
}

/// Differentially correct a perpendicular-crossing seed into a periodic orbit.
///
/// Three-dimensional families hold x0 fixed and adjust (z0, vy0); planar
/// families hold z = vz = 0 and adjust vy0. The half period is taken at the
/// y = 0 crossing closest to `period_guess / 2`.
pub fn correct_periodic(
    family: Family,
    seed: &CrState,
    period_guess: f64,
    c: &SystemConstants,
    settings: &CorrectorSettings,
) -> Result<(PeriodicOrbit, CorrectionReport)> {
    if seed.y.abs() > 1e-14 {
        return Err(OrbitError::SeedOffPlane(seed.y));
    }
    if !(period_guess > 0.0) {
        return Err(OrbitError::InvalidArgument(format!(
            "period guess {period_guess} must be positive"
        )));
    }
    let planar = family.is_planar();
    let mut ic = CrState::new(seed.x, 0.0, seed.z, 0.0, seed.vy, 0.0);
    if planar {
        ic.z = 0.0;
    }

    let k = half_crossing_index(&ic, period_guess, settings.tol, c)?;
    let t_limit = 2.0 * period_guess;

    let mut residual = f64::INFINITY;
    for iter in 0..=settings.max_iterations {
        let (t_half, s, phi) = propagate_to_crossing(&ic, k, t_limit, settings.tol, c)?;
        let acc = cr3bp::eom(&s, c)?;
        residual = if planar {
            s.vx.abs()
        } else {
            s.vx.hypot(s.vz)
        };
        if residual <= settings.residual_tol {
            let period = 2.0 * t_half;
            let closure = closure_error(&ic, period, settings.tol, c)?;
            if closure > settings.closure_tol {
                return Err(OrbitError::ClosureFailed(closure));
            }
            let jc = jacobi_constant(&ic, c)?;
            let mut orbit = PeriodicOrbit {
                family,
                ic,
                period,
                stability_index: f64::NAN,
                jc,
            };
            let (_, xi) = monodromy_stability(&orbit, c)?;
            orbit.stability_index = xi;
            return Ok((
                orbit,
                CorrectionReport {
                    iterations: iter,
                    residual,
                    closure,
                },
            ));
        }
        if iter == settings.max_iterations {
            break;
        }
        // Crossing-time sensitivity: dt = -(phi_y,· δx0) / vy.
        let ax_vy = acc[3] / s.vy;
        let az_vy = acc[5] / s.vy;
        if planar {
            let m = phi[(3, 4)] - ax_vy * phi[(1, 4)];
            if m == 0.0 || !m.is_finite() {
                break;
            }
            ic.vy -= s.vx / m;
        } else {
            let m = Matrix2::new(
                phi[(3, 2)] - ax_vy * phi[(1, 2)],
                phi[(3, 4)] - ax_vy * phi[(1, 4)],
                phi[(5, 2)] - az_vy * phi[(1, 2)],
                phi[(5, 4)] - az_vy * phi[(1, 4)],
            );
            let Some(inv) = m.try_inverse() else { break };
            let delta = inv * Vector2::new(s.vx, s.vz);
            ic.z -= delta[0];
            ic.vy -= delta[1];
        }
        if !ic.is_finite() {
            break;
        }
    }
    Err(OrbitError::NoConvergence {
        iterations: settings.max_iterations,
        residual,
    })
}

/// Monodromy matrix and stability index ½(|η| + |η|⁻¹) of the dominant eigenvalue.
pub fn monodromy_stability(orbit: &PeriodicOrbit, c: &SystemConstants) -> Result<(Matrix6<f64>, f64)> {
    let stm = cr3bp::propagate_with_stm(&orbit.ic, 0.0, orbit.period, 1e-12, c)?;
    let eig = stm.phi.complex_eigenvalues();
    let dominant = eig
        .iter()
        .map(|e| e.norm())
        .fold(f64::NAN, f64::max);
    if !dominant.is_finite() || dominant <= 0.0 {
        return Err(OrbitError::EigenFailure);
    }
    Ok((stm.phi, 0.5 * (dominant + 1.0 / dominant)))
}

/// Outcome of a continuation run; `termination` holds the error that ended
/// the family early, if any.
#[derive(Debug)]
pub struct ContinuationResult {
    pub orbits: Vec<PeriodicOrbit>,
    pub termination: Option<OrbitError>,
}

/// Natural-parameter continuation in x0 starting from a corrected orbit.
pub fn continue_family(
    first: &PeriodicOrbit,
    dx: f64,
    count: usize,
    c: &SystemConstants,
    settings: &CorrectorSettings,
) -> ContinuationResult {
    let mut orbits = vec![*first];
    if count <= 1 {
        return ContinuationResult {
            orbits,
            termination: None,
        };
    }
    if dx == 0.0 || !dx.is_finite() {
        return ContinuationResult {
            orbits,
            termination: Some(OrbitError::InvalidArgument("continuation step must be nonzero".into())),
        };
    }
    let mut current = *first;
    let mut previous: Option<PeriodicOrbit> = None;
    while orbits.len() < count {
        let target = current.ic.x + dx;
        match advance(&current, previous.as_ref(), target, c, settings) {
            Ok(next) => {
                previous = Some(current);
                current = next;
                orbits.push(next);
            }
            Err(e) => {
                return ContinuationResult {
                    orbits,
                    termination: Some(e),
                }
            }
        }
    }
    ContinuationResult {
        orbits,
        termination: None,
    }
}

/// Family tangent (dz0/dx0, dvy0/dx0, dT/dx0) from the half-period STM.
fn family_tangent(orbit: &PeriodicOrbit, c: &SystemConstants, tol: f64) -> Result<(f64, f64, f64)> {
    let k = half_crossing_index(&orbit.ic, orbit.period, tol, c)?;
    let (_, s, phi) = propagate_to_crossing(&orbit.ic, k, 2.0 * orbit.period, tol, c)?;
    let acc = cr3bp::eom(&s, c)?;
    let ax_vy = acc[3] / s.vy;
    let az_vy = acc[5] / s.vy;
    let row = |r: usize, a: f64, j: usize| phi[(r, j)] - a * phi[(1, j)];
    let (dz, dvy) = if orbit.family.is_planar() {
        let m = row(3, ax_vy, 4);
        if m == 0.0 {
            return Err(OrbitError::EigenFailure);
        }
        (0.0, -row(3, ax_vy, 0) / m)
    } else {
        let m = Matrix2::new(row(3, ax_vy, 2), row(3, ax_vy, 4), row(5, az_vy, 2), row(5, az_vy, 4));
        let inv = m.try_inverse().ok_or(OrbitError::EigenFailure)?;
        let d = -(inv * Vector2::new(row(3, ax_vy, 0), row(5, az_vy, 0)));
        (d[0], d[1])
    };
    let dt = -(phi[(1, 0)] + phi[(1, 2)] * dz + phi[(1, 4)] * dvy) / s.vy;
    Ok((dz, dvy, 2.0 * dt))
}

fn predict(
    current: &PeriodicOrbit,
    previous: Option<&PeriodicOrbit>,
    tangent: Option<(f64, f64, f64)>,
    x: f64,
) -> (CrState, f64) {
    let mut s = current.ic;
    let mut period = current.period;
    if previous.is_none() {
        if let Some((dz, dvy, dt)) = tangent {
            let w = x - current.ic.x;
            s.z += w * dz;
            s.vy += w * dvy;
            period += w * dt;
        }
    } else if let Some(p) = previous {
        let span = current.ic.x - p.ic.x;
        if span != 0.0 {
            let w = (x - current.ic.x) / span;
            s.z += w * (current.ic.z - p.ic.z);
            s.vy += w * (current.ic.vy - p.ic.vy);
            period += w * (current.period - p.period);
        }
    }
    s.x = x;
    (s, period)
}

fn advance(
    current: &PeriodicOrbit,
    previous: Option<&PeriodicOrbit>,
    target: f64,
    c: &SystemConstants,
    settings: &CorrectorSettings,
) -> Result<PeriodicOrbit> {
    let mut last_err = None;
    let tangent = if previous.is_none() {
        family_tangent(current, c, settings.tol).ok()
    } else {
        None
    };
    // Subdivide the requested spacing when the corrector struggles.
    for level in 0..5 {
        let pieces = 1usize << level;
        let step = (target - current.ic.x) / pieces as f64;
        let mut cur = *current;
        let mut prev = previous.copied();
        let mut ok = true;
        for i in 1..=pieces {
            let x = if i == pieces { target } else { current.ic.x + step * i as f64 };
            let (seed, period) = predict(&cur, prev.as_ref(), tangent, x);
            match correct_periodic(cur.family, &seed, period, c, settings) {
                Ok((orbit, _)) if (orbit.period - period).abs() < 0.25 * period => {
                    prev = Some(cur);
                    cur = orbit;
                }
                Ok((orbit, _)) => {
                    last_err = Some(OrbitError::NoConvergence {
                        iterations: 0,
                        residual: (orbit.period - period).abs(),
                    });
                    ok = false;
                    break;
                }
                Err(e) => {
                    last_err = Some(e);
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(cur);
        }
    }
    Err(last_err.unwrap_or(OrbitError::NoConvergence {
        iterations: 0,
        residual: f64::NAN,
    }))
}

/// States of `n` satellites spread at equal temporal offsets kT/n along the orbit.
pub fn place_satellites(orbit: &PeriodicOrbit, n: usize, c: &SystemConstants) -> Result<Vec<CrState>> {
    if !(1..=10).contains(&n) {
        return Err(OrbitError::InvalidArgument(format!(
            "satellite count {n} outside [1, 10]"
        )));
    }
    if n == 1 {
        return Ok(vec![orbit.ic]);
    }
    let step = orbit.period / n as f64;
    let tr = cr3bp::propagate(&orbit.ic, 0.0, step * (n - 1) as f64, 1e-12, c)?;
    let times: Vec<f64> = (0..n).map(|k| step * k as f64).collect();
    Ok(tr.sample(&times)?)
}

/// Phase fractions k/n for an orbit hosting `n` satellites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatellitePlacement {
    pub orbit_index: usize,
    pub phase_fractions: Vec<f64>,
}

impl SatellitePlacement {
    pub fn new(orbit_index: usize, n: usize) -> Self {
        Self {
            orbit_index,
            phase_fractions: (0..n).map(|k| k as f64 / n as f64).collect(),
        }
    }
}

/// One period of an orbit, sampled modulo the period so long arcs never
/// accumulate integration drift.
#[derive(Debug, Clone)]
pub struct OrbitEphemeris {
    pub period: f64,
    trajectory: Trajectory,
}

impl OrbitEphemeris {
    pub fn new(orbit: &PeriodicOrbit, tol: f64, c: &SystemConstants) -> Result<Self> {
        let trajectory = cr3bp::propagate(&orbit.ic, 0.0, orbit.period, tol, c)?;
        Ok(Self {
            period: orbit.period,
            trajectory,
        })
    }

    /// State at time `t` after the crossing, wrapped by the period.
    pub fn state_at(&self, t: f64) -> CrState {
        let phase = t.rem_euclid(self.period);
        self.trajectory
            .state_at(phase.min(self.period))
            .expect("phase lies within one period")
    }
}

/// One row of the seed file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitSeed {
    pub family: Family,
    pub x0: f64,
    pub z0: f64,
    pub vy0: f64,
    pub period_guess: f64,
}

impl OrbitSeed {
    pub fn state(&self) -> CrState {
        CrState::new(self.x0, 0.0, self.z0, 0.0, self.vy0, 0.0)
    }
}

/// Seed file bundled with the crate.
pub const BUNDLED_SEEDS: &str = include_str!("../data/seeds.csv");

pub fn read_seeds<R: Read>(reader: R) -> Result<Vec<OrbitSeed>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut seeds = Vec::new();
    for row in rdr.deserialize() {
        seeds.push(row?);
    }
    Ok(seeds)
}

pub fn bundled_seeds() -> Vec<OrbitSeed> {
    read_seeds(BUNDLED_SEEDS.as_bytes()).expect("bundled seed file is valid")
}

/// Per-family continuation request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyPlan {
    pub dx: f64,
    pub count: usize,
}

impl FamilyPlan {
    /// Default step with `count` members.
    pub fn with_count(family: Family, count: usize) -> Self {
        Self {
            dx: family.default_step(),
            count,
        }
    }
}

/// Ordered, immutable set of candidate orbits; indices are stable for a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitLibrary {
    pub orbits: Vec<PeriodicOrbit>,
    pub provenance: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct LibraryBuildReport {
    pub per_family: Vec<(Family, usize)>,
    pub failures: Vec<(Family, String)>,
}

impl OrbitLibrary {
    pub fn len(&self) -> usize {
        self.orbits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orbits.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&PeriodicOrbit> {
        self.orbits.get(i)
    }

    /// Correct each seed and continue its family. Families are processed
    /// concurrently; output order follows the seed order.
    pub fn build<F>(
        seeds: &[OrbitSeed],
        plan: F,
        provenance: &str,
        c: &SystemConstants,
        settings: &CorrectorSettings,
    ) -> (Self, LibraryBuildReport)
    where
        F: Fn(Family) -> Option<FamilyPlan> + Sync,
    {
        let results: Vec<(Family, std::result::Result<Vec<PeriodicOrbit>, String>)> = seeds
            .par_iter()
            .map(|seed| {
                let Some(p) = plan(seed.family) else {
                    return (seed.family, Ok(Vec::new()));
                };
                if p.count == 0 {
                    return (seed.family, Ok(Vec::new()));
                }
                let first = match correct_periodic(seed.family, &seed.state(), seed.period_guess, c, settings) {
                    Ok((o, _)) => o,
                    Err(e) => return (seed.family, Err(e.to_string())),
                };
                let res = continue_family(&first, p.dx, p.count, c, settings);
                if let Some(e) = &res.termination {
                    warn!(
                        "family {} terminated after {} of {} members: {e}",
                        seed.family,
                        res.orbits.len(),
                        p.count
                    );
                }
                (seed.family, Ok(res.orbits))
            })
            .collect();
        let mut orbits = Vec::new();
        let mut report = LibraryBuildReport {
            per_family: Vec::new(),
            failures: Vec::new(),
        };
        for (family, r) in results {
            match r {
                Ok(list) => {
                    report.per_family.push((family, list.len()));
                    orbits.extend(list);
                }
                Err(e) => {
                    warn!("seed for family {family} failed: {e}");
                    report.failures.push((family, e));
                }
            }
        }
        info!("orbit library built with {} orbits", orbits.len());
        (
            Self {
                orbits,
                provenance: provenance.to_string(),
            },
            report,
        )
    }

    /// Subset of families, re-indexed in library order.
    pub fn filtered(&self, keep: impl Fn(Family) -> bool) -> Self {
        Self {
            orbits: self.orbits.iter().filter(|o| keep(o.family)).copied().collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["index", "family", "x0", "z0", "vy0", "period", "jc", "stability_index"])?;
        for (i, o) in self.orbits.iter().enumerate() {
            wtr.write_record([
                i.to_string(),
                o.family.tag().to_string(),
                o.ic.x.to_string(),
                o.ic.z.to_string(),
                o.ic.vy.to_string(),
                o.period.to_string(),
                o.jc.to_string(),
                o.stability_index.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, provenance: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            index: usize,
            family: Family,
            x0: f64,
            z0: f64,
            vy0: f64,
            period: f64,
            jc: f64,
            stability_index: f64,
        }
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(r);
        let mut orbits = Vec::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            if row.index != orbits.len() {
                return Err(OrbitError::InvalidArgument(format!(
                    "library rows must be indexed consecutively (found {} at row {})",
                    row.index,
                    orbits.len()
                )));
            }
            orbits.push(PeriodicOrbit {
                family: row.family,
                ic: CrState::new(row.x0, 0.0, row.z0, 0.0, row.vy0, 0.0),
                period: row.period,
                stability_index: row.stability_index,
                jc: row.jc,
            });
        }
        Ok(Self {
            orbits,
            provenance: provenance.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts() -> SystemConstants {
        SystemConstants::default()
    }

    fn seed(family: Family) -> OrbitSeed {
        *bundled_seeds().iter().find(|s| s.family == family).unwrap()
    }

    fn corrected(family: Family) -> PeriodicOrbit {
        let s = seed(family);
        correct_periodic(family, &s.state(), s.period_guess, &consts(), &CorrectorSettings::default())
            .unwrap()
            .0
    }

    #[test]
    fn every_bundled_seed_corrects() {
        let c = consts();
        for s in bundled_seeds() {
            let (o, rep) = correct_periodic(s.family, &s.state(), s.period_guess, &c, &CorrectorSettings::default())
                .unwrap_or_else(|e| panic!("{}: {e}", s.family));
            assert!(rep.closure <= 1e-8, "{}: closure {}", s.family, rep.closure);
            assert!(o.stability_index >= 1.0);
            assert!((o.period - s.period_guess).abs() < 1e-3 * s.period_guess, "{}", s.family);
        }
    }

    #[test]
    fn seed_off_plane_is_rejected() {
        let mut s = seed(Family::L1HaloNorth).state();
        s.y = 1e-3;
        let err = correct_periodic(Family::L1HaloNorth, &s, 2.55, &consts(), &CorrectorSettings::default());
        assert!(matches!(err, Err(OrbitError::SeedOffPlane(_))));
    }

    #[test]
    fn recorrection_is_a_fixed_point() {
        let c = consts();
        let o = corrected(Family::L2HaloSouth);
        let (again, rep) = correct_periodic(o.family, &o.ic, o.period, &c, &CorrectorSettings::default()).unwrap();
        assert!(rep.iterations <= 1);
        assert!((again.ic.to_vector() - o.ic.to_vector()).amax() <= 1e-10);
    }

    #[test]
    fn perturbed_orbit_recovers_closure() {
        let c = consts();
        let o = corrected(Family::L1HaloNorth);
        let mut s = o.ic;
        s.z += 1e-4;
        let (back, rep) = correct_periodic(o.family, &s, o.period, &c, &CorrectorSettings::default()).unwrap();
        assert!(rep.closure <= 1e-8);
        assert!((back.ic.z - o.ic.z).abs() < 1e-8);
    }

    #[test]
    fn monodromy_spectrum_structure() {
        let c = consts();
        for fam in [Family::L1HaloNorth, Family::L2Lyapunov, Family::Dro] {
            let o = corrected(fam);
            let (m, xi) = monodromy_stability(&o, &c).unwrap();
            let det = m.determinant();
            assert!((det - 1.0).abs() < 1e-6, "{fam}: det {det}");
            let eig = m.complex_eigenvalues();
            let near_one = eig.iter().filter(|e| (*e - nalgebra::Complex::new(1.0, 0.0)).norm() < 1e-3).count();
            assert!(near_one >= 2, "{fam}: {eig:?}");
            for e in eig.iter() {
                let inv = 1.0 / e;
                let best = eig.iter().map(|f| (f - inv).norm()).fold(f64::INFINITY, f64::min);
                assert!(best < 1e-6, "{fam}: no reciprocal for {e}");
            }
            assert!(xi >= 1.0);
        }
    }

    #[test]
    fn planar_stability_matches_trace_reduction() {
        // For planar Lyapunov orbits the in-plane monodromy block carries the
        // hyperbolic pair; its trace (minus the trivial pair) gives η + 1/η.
        let c = consts();
        let o = corrected(Family::L1Lyapunov);
        let (m, xi) = monodromy_stability(&o, &c).unwrap();
        let idx = [0usize, 1, 3, 4];
        let trace: f64 = idx.iter().map(|&i| m[(i, i)]).sum();
        let xi_trace = 0.5 * (trace - 2.0);
        assert!(xi > 100.0, "L1 Lyapunov should be strongly unstable: {xi}");
        assert!((xi - xi_trace).abs() / xi < 1e-6, "{xi} vs {xi_trace}");
        let dro = corrected(Family::Dro);
        let (_, xi_dro) = monodromy_stability(&dro, &c).unwrap();
        assert!(xi_dro < 1.0 + 1e-6, "DRO should be linearly stable: {xi_dro}");
    }

    #[test]
    fn continuation_emits_closed_monotone_members() {
        let c = consts();
        let first = corrected(Family::L1Lyapunov);
        let res = continue_family(&first, -0.01, 4, &c, &CorrectorSettings::default());
        assert!(res.termination.is_none(), "{:?}", res.termination);
        assert_eq!(res.orbits.len(), 4);
        for w in res.orbits.windows(2) {
            assert!(w[1].ic.x < w[0].ic.x);
            assert!((w[1].ic.x - w[0].ic.x + 0.01).abs() < 1e-12);
        }
        for o in &res.orbits {
            assert!(closure_error(&o.ic, o.period, 1e-12, &c).unwrap() <= 1e-8);
        }
        let single = continue_family(&first, -0.01, 1, &c, &CorrectorSettings::default());
        assert_eq!(single.orbits.len(), 1);
        assert_eq!(single.orbits[0], first);
    }

    #[test]
    fn jacobi_constant_is_locally_monotone_along_family() {
        let c = consts();
        let first = corrected(Family::L2HaloSouth);
        let fine = continue_family(&first, 0.0005, 6, &c, &CorrectorSettings::default());
        assert!(fine.termination.is_none());
        let jcs: Vec<f64> = fine.orbits.iter().map(|o| o.jc).collect();
        let diffs: Vec<f64> = jcs.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(
            diffs.iter().all(|d| *d > 0.0) || diffs.iter().all(|d| *d < 0.0),
            "{jcs:?}"
        );
    }

    #[test]
    fn satellites_are_equally_phased() {
        let c = consts();
        let o = corrected(Family::L2HaloNorth);
        assert_eq!(place_satellites(&o, 1, &c).unwrap(), vec![o.ic]);
        let sats = place_satellites(&o, 5, &c).unwrap();
        assert_eq!(sats.len(), 5);
        for k in 0..4 {
            let next = cr3bp::propagate_final(&sats[k], 0.0, o.period / 5.0, 1e-12, &c).unwrap();
            assert!((next.to_vector() - sats[k + 1].to_vector()).amax() < 1e-8, "k = {k}");
        }
        for s in &sats {
            assert!((jacobi_constant(s, &c).unwrap() - o.jc).abs() < 1e-9);
        }
        assert!(place_satellites(&o, 0, &c).is_err());
        assert!(place_satellites(&o, 11, &c).is_err());
        let p = SatellitePlacement::new(3, 4);
        assert_eq!(p.phase_fractions, vec![0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn library_csv_round_trips() {
        let c = consts();
        let seeds: Vec<_> = bundled_seeds()
            .into_iter()
            .filter(|s| matches!(s.family, Family::L1Lyapunov | Family::Dro))
            .collect();
        let (lib, report) = OrbitLibrary::build(
            &seeds,
            |_| Some(FamilyPlan { dx: 0.005, count: 2 }),
            "test",
            &c,
            &CorrectorSettings::default(),
        );
        assert!(report.failures.is_empty());
        let mut buf = Vec::new();
        lib.write_csv(&mut buf).unwrap();
        let back = OrbitLibrary::read_csv(buf.as_slice(), "test").unwrap();
        assert_eq!(back.orbits, lib.orbits);
    }

    #[test]
    fn family_tags_parse() {
        for f in Family::ALL {
            assert_eq!(f.tag().parse::<Family>().unwrap(), f);
        }
        assert!("l4_halo".parse::<Family>().is_err());
        assert_eq!(Family::ALL.iter().filter(|f| f.is_observer_family()).count(), 13);
    }
}
