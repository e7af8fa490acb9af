//! Earth–Moon circular restricted three-body problem in the nondimensional
//! barycentric rotating frame.

use nalgebra::{Matrix3, Matrix6, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::{self, StepFailure, StepperOptions};

/// Distance to a primary below which the dynamics are treated as singular.
pub const SINGULARITY_RADIUS: f64 = 1e-12;

const ZVS_RHO_MIN: f64 = 0.2;
const ZVS_RHO_MAX: f64 = 2.0;
const ZVS_STRIDE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Cr3bpError {
    #[error("state within {radius:e} of a primary (d = {d:e}, r = {r:e})")]
    Singularity { d: f64, r: f64, radius: f64 },
    #[error(transparent)]
    Integration(#[from] StepFailure),
    #[error("invalid system constants: {0}")]
    InvalidConstants(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("root finder failed to converge: {0}")]
    RootNotFound(String),
}

pub type Result<T> = std::result::Result<T, Cr3bpError>;

/// Mass ratio and characteristic scales of the primaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemConstants {
    pub mu: f64,
    /// Characteristic length, km.
    pub l_star: f64,
    /// Characteristic time, s.
    pub t_star: f64,
}

impl Default for SystemConstants {
    fn default() -> Self {
        Self {
            mu: 0.01215,
            l_star: 384_400.0,
            t_star: 375_190.0,
        }
    }
}

impl SystemConstants {
    pub fn new(mu: f64, l_star: f64, t_star: f64) -> Result<Self> {
        let c = Self { mu, l_star, t_star };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu < 0.5) {
            return Err(Cr3bpError::InvalidConstants(format!(
                "mu = {} outside (0, 0.5)",
                self.mu
            )));
        }
        if !(self.l_star > 0.0 && self.t_star > 0.0) {
            return Err(Cr3bpError::InvalidConstants(
                "characteristic length and time must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn earth(&self) -> Vector3<f64> {
        Vector3::new(-self.mu, 0.0, 0.0)
    }

    pub fn moon(&self) -> Vector3<f64> {
        Vector3::new(1.0 - self.mu, 0.0, 0.0)
    }

    /// Nondimensional length unit in metres.
    pub fn length_unit_m(&self) -> f64 {
        self.l_star * 1e3
    }

    /// Nondimensional velocity unit in m/s.
    pub fn velocity_unit_m_s(&self) -> f64 {
        self.l_star * 1e3 / self.t_star
    }

    pub fn seconds_to_nd(&self, s: f64) -> f64 {
        s / self.t_star
    }

    pub fn days_to_nd(&self, days: f64) -> f64 {
        days * 86_400.0 / self.t_star
    }

    pub fn nd_to_seconds(&self, t: f64) -> f64 {
        t * self.t_star
    }
}

/// Translational state in the rotating frame, nondimensional.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CrState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
}

impl CrState {
    pub fn new(x: f64, y: f64, z: f64, vx: f64, vy: f64, vz: f64) -> Self {
        Self { x, y, z, vx, vy, vz }
    }

    pub fn from_pos_vel(r: &Vector3<f64>, v: &Vector3<f64>) -> Self {
        Self::new(r[0], r[1], r[2], v[0], v[1], v[2])
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.x, self.y, self.z, self.vx, self.vy, self.vz)
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn velocity(&self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.vz)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    /// Mirror image across the x-y plane.
    pub fn mirrored_z(&self) -> Self {
        Self::new(self.x, self.y, -self.z, self.vx, self.vy, -self.vz)
    }
}

fn primary_distances(p: &Vector3<f64>, mu: f64) -> Result<(f64, f64)> {
    let d = ((p[0] + mu).powi(2) + p[1] * p[1] + p[2] * p[2]).sqrt();
    let r = ((p[0] - 1.0 + mu).powi(2) + p[1] * p[1] + p[2] * p[2]).sqrt();
    if d < SINGULARITY_RADIUS || r < SINGULARITY_RADIUS || !d.is_finite() || !r.is_finite() {
        return Err(Cr3bpError::Singularity {
            d,
            r,
            radius: SINGULARITY_RADIUS,
        });
    }
    Ok((d, r))
}

/// Pseudo-potential U = (x² + y²)/2 + (1-μ)/d + μ/r.
pub fn pseudo_potential(p: &Vector3<f64>, mu: f64) -> Result<f64> {
    let (d, r) = primary_distances(p, mu)?;
    Ok(0.5 * (p[0] * p[0] + p[1] * p[1]) + (1.0 - mu) / d + mu / r)
}

/// Gradient of the pseudo-potential.
pub fn potential_gradient(p: &Vector3<f64>, mu: f64) -> Result<Vector3<f64>> {
    let (d, r) = primary_distances(p, mu)?;
    let d3 = d * d * d;
    let r3 = r * r * r;
    let k = (1.0 - mu) / d3 + mu / r3;
    Ok(Vector3::new(
        p[0] - (1.0 - mu) * (p[0] + mu) / d3 - mu * (p[0] - 1.0 + mu) / r3,
        p[1] - k * p[1],
        -k * p[2],
    ))
}

/// Hessian of the pseudo-potential.
pub fn potential_hessian(p: &Vector3<f64>, mu: f64) -> Result<Matrix3<f64>> {
    let (d, r) = primary_distances(p, mu)?;
    let (x, y, z) = (p[0], p[1], p[2]);
    let d3 = d.powi(3);
    let r3 = r.powi(3);
    let d5 = d.powi(5);
    let r5 = r.powi(5);
    let a = 1.0 - mu;
    let xe = x + mu;
    let xm = x - 1.0 + mu;
    let k = a / d3 + mu / r3;
    let uxx = 1.0 - k + 3.0 * a * xe * xe / d5 + 3.0 * mu * xm * xm / r5;
    let uyy = 1.0 - k + 3.0 * a * y * y / d5 + 3.0 * mu * y * y / r5;
    let uzz = -k + 3.0 * a * z * z / d5 + 3.0 * mu * z * z / r5;
    let uxy = 3.0 * a * xe * y / d5 + 3.0 * mu * xm * y / r5;
    let uxz = 3.0 * a * xe * z / d5 + 3.0 * mu * xm * z / r5;
    let uyz = 3.0 * a * y * z / d5 + 3.0 * mu * y * z / r5;
    Ok(Matrix3::new(uxx, uxy, uxz, uxy, uyy, uyz, uxz, uyz, uzz))
}

fn eom_vec(s: &Vector6<f64>, mu: f64) -> Result<Vector6<f64>> {
    let g = potential_gradient(&Vector3::new(s[0], s[1], s[2]), mu)?;
    Ok(Vector6::new(
        s[3],
        s[4],
        s[5],
        g[0] + 2.0 * s[4],
        g[1] - 2.0 * s[3],
        g[2],
    ))
}

/// Time derivative `(vx, vy, vz, ax, ay, az)` of a rotating-frame state.
pub fn eom(state: &CrState, c: &SystemConstants) -> Result<Vector6<f64>> {
    eom_vec(&state.to_vector(), c.mu)
}

/// Jacobian of the equations of motion with respect to the state.
pub fn eom_jacobian(state: &CrState, c: &SystemConstants) -> Result<Matrix6<f64>> {
    jacobian_at(&state.position(), c.mu)
}

fn jacobian_at(p: &Vector3<f64>, mu: f64) -> Result<Matrix6<f64>> {
    let h = potential_hessian(p, mu)?;
    let mut a = Matrix6::zeros();
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    a.fixed_view_mut::<3, 3>(3, 0).copy_from(&h);
    a[(3, 4)] = 2.0;
    a[(4, 3)] = -2.0;
    Ok(a)
}

/// Jacobi constant 2U − v².
pub fn jacobi_constant(state: &CrState, c: &SystemConstants) -> Result<f64> {
    let u = pseudo_potential(&state.position(), c.mu)?;
    Ok(2.0 * u - state.velocity().norm_squared())
}

/// Dense trajectory produced by [`propagate`].
#[derive(Debug, Clone)]
pub struct Trajectory {
    solution: integrate::Solution<6>,
}

impl Trajectory {
    pub fn t0(&self) -> f64 {
        self.solution.t0
    }

    pub fn tf(&self) -> f64 {
        self.solution.tf
    }

    pub fn initial_state(&self) -> CrState {
        CrState::from_vector(&self.solution.y0)
    }

    pub fn final_state(&self) -> CrState {
        CrState::from_vector(&self.solution.yf)
    }

    /// State at any time inside the integrated span.
    pub fn state_at(&self, t: f64) -> Option<CrState> {
        self.solution.eval(t).map(|v| CrState::from_vector(&v))
    }

    pub fn sample(&self, times: &[f64]) -> Result<Vec<CrState>> {
        times
            .iter()
            .map(|&t| {
                self.state_at(t).ok_or_else(|| {
                    Cr3bpError::InvalidArgument(format!("sample time {t} outside trajectory span"))
                })
            })
            .collect()
    }

    pub fn steps(&self) -> usize {
        self.solution.steps
    }

    pub(crate) fn solution(&self) -> &integrate::Solution<6> {
        &self.solution
    }
}

/// Propagate a state with adaptive DOPRI5(4) at relative and absolute tolerance `tol`.
pub fn propagate(
    state: &CrState,
    t0: f64,
    tf: f64,
    tol: f64,
    c: &SystemConstants,
) -> Result<Trajectory> {
    if !(tol > 0.0) {
        return Err(Cr3bpError::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    let mu = c.mu;
    let opts = StepperOptions::new(tol);
    let solution = integrate::integrate(
        |_t, y: &Vector6<f64>| eom_vec(y, mu),
        t0,
        state.to_vector(),
        tf,
        &opts,
    )?;
    Ok(Trajectory { solution })
}

/// Final state only, without keeping interpolation data.
pub fn propagate_final(
    state: &CrState,
    t0: f64,
    tf: f64,
    tol: f64,
    c: &SystemConstants,
) -> Result<CrState> {
    let mu = c.mu;
    let opts = StepperOptions::new(tol).sparse();
    let sol = integrate::integrate(
        |_t, y: &Vector6<f64>| eom_vec(y, mu),
        t0,
        state.to_vector(),
        tf,
        &opts,
    )?;
    Ok(CrState::from_vector(&sol.yf))
}

/// State together with its state transition matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StmState {
    pub t: f64,
    pub state: CrState,
    pub phi: Matrix6<f64>,
}

pub(crate) type Augmented = SVector<f64, 42>;

pub(crate) fn pack_augmented(state: &CrState, phi: &Matrix6<f64>) -> Augmented {
    let mut y = Augmented::zeros();
    y.fixed_rows_mut::<6>(0).copy_from(&state.to_vector());
    for (i, v) in phi.iter().enumerate() {
        y[6 + i] = *v;
    }
    y
}

pub(crate) fn unpack_augmented(y: &Augmented) -> (CrState, Matrix6<f64>) {
    let s = CrState::new(y[0], y[1], y[2], y[3], y[4], y[5]);
    let phi = Matrix6::from_iterator(y.iter().skip(6).copied());
    (s, phi)
}

pub(crate) fn augmented_rhs(y: &Augmented, mu: f64) -> Result<Augmented> {
    let s6 = y.fixed_rows::<6>(0).into_owned();
    let ds = eom_vec(&s6, mu)?;
    let a = jacobian_at(&Vector3::new(y[0], y[1], y[2]), mu)?;
    let phi = Matrix6::from_iterator(y.iter().skip(6).copied());
    let dphi = a * phi;
    let mut out = Augmented::zeros();
    out.fixed_rows_mut::<6>(0).copy_from(&ds);
    for (i, v) in dphi.iter().enumerate() {
        out[6 + i] = *v;
    }
    Ok(out)
}

/// Propagate the state and the variational equations together.
pub fn propagate_with_stm(
    state: &CrState,
    t0: f64,
    tf: f64,
    tol: f64,
    c: &SystemConstants,
) -> Result<StmState> {
    if !(tol > 0.0) {
        return Err(Cr3bpError::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    let mu = c.mu;
    let y0 = pack_augmented(state, &Matrix6::identity());
    let opts = StepperOptions::new(tol).sparse();
    let sol = integrate::integrate(|_t, y: &Augmented| augmented_rhs(y, mu), t0, y0, tf, &opts)?;
    let (s, phi) = unpack_augmented(&sol.yf);
    Ok(StmState { t: tf, state: s, phi })
}

/// ∂U/∂x restricted to the x-axis.
fn collinear_condition(x: f64, mu: f64) -> f64 {
    let d = x + mu;
    let r = x - 1.0 + mu;
    x - (1.0 - mu) * d / d.abs().powi(3) - mu * r / r.abs().powi(3)
}

fn bisect<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> Result<f64> {
    let mut fa = f(a);
    let fb = f(b);
    if fa.signum() == fb.signum() {
        return Err(Cr3bpError::RootNotFound(format!(
            "no sign change on [{a}, {b}]"
        )));
    }
    for _ in 0..400 {
        let m = 0.5 * (a + b);
        if (b - a).abs() < tol || m == a || m == b {
            return Ok(m);
        }
        let fm = f(m);
        if fm == 0.0 {
            return Ok(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// The five equilibrium points L1..L5 (positions).
pub fn libration_points(c: &SystemConstants) -> Result<[Vector3<f64>; 5]> {
    c.validate()?;
    let mu = c.mu;
    let eps = 1e-9;
    let f = |x: f64| collinear_condition(x, mu);
    let l1 = bisect(f, -mu + eps, 1.0 - mu - eps, 1e-14)?;
    let l2 = bisect(f, 1.0 - mu + eps, 2.0, 1e-14)?;
    let l3 = bisect(f, -2.0, -mu - eps, 1e-14)?;
    let h = 3f64.sqrt() / 2.0;
    Ok([
        Vector3::new(l1, 0.0, 0.0),
        Vector3::new(l2, 0.0, 0.0),
        Vector3::new(l3, 0.0, 0.0),
        Vector3::new(0.5 - mu, h, 0.0),
        Vector3::new(0.5 - mu, -h, 0.0),
    ])
}

/// First crossing of the zero-velocity surface `2U = jc` along a ray from the
/// barycenter, searched outward from ρ = 0.2 to ρ = 2.0.
pub fn zvs_radius(direction: &Vector3<f64>, jc: f64, c: &SystemConstants) -> Result<Option<f64>> {
    let n = direction.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(Cr3bpError::InvalidArgument(format!(
            "ray direction must be a unit vector (|d| = {n})"
        )));
    }
    let mu = c.mu;
    let g = |rho: f64| -> Option<f64> {
        pseudo_potential(&(direction * rho), mu)
            .ok()
            .map(|u| 2.0 * u - jc)
    };
    let steps = ((ZVS_RHO_MAX - ZVS_RHO_MIN) / ZVS_STRIDE).round() as usize;
    let mut a = ZVS_RHO_MIN;
    let mut ga = match g(a) {
        Some(v) => v,
        None => return Ok(None),
    };
    for i in 1..=steps {
        let b = ZVS_RHO_MIN + i as f64 * ZVS_STRIDE;
        let Some(gb) = g(b) else {
            // Stride landed on a primary; restart the bracket past it.
            a = b;
            continue;
        };
        if ga == 0.0 {
            return Ok(Some(a));
        }
        if ga.signum() != gb.signum() {
            let root = bisect(|r| g(r).unwrap_or(f64::INFINITY), a, b, 1e-15)?;
            return Ok(Some(root));
        }
        a = b;
        ga = gb;
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn consts() -> SystemConstants {
        SystemConstants::default()
    }

    /// Independent oracle for the collinear points: Newton on the classical
    /// quintic in the distance γ from the nearer primary.
    /// Fixed-step RK4 oracle; identical step sequences keep finite differences clean.
    fn rk4_final(s: &CrState, t: f64, c: &SystemConstants) -> CrState {
        let n = 5_000;
        let h = t / n as f64;
        let f = |y: &Vector6<f64>| eom(&CrState::from_vector(y), c).unwrap();
        let mut y = s.to_vector();
        for _ in 0..n {
            let k1 = f(&y);
            let k2 = f(&(y + k1 * (0.5 * h)));
            let k3 = f(&(y + k2 * (0.5 * h)));
            let k4 = f(&(y + k3 * h));
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        CrState::from_vector(&y)
    }

    fn quintic_l1(mu: f64) -> f64 {
        // γ⁵ − (3−μ)γ⁴ + (3−2μ)γ³ − μγ² + 2μγ − μ = 0, x = 1 − μ − γ
        let p = |g: f64| {
            g.powi(5) - (3.0 - mu) * g.powi(4) + (3.0 - 2.0 * mu) * g.powi(3) - mu * g * g
                + 2.0 * mu * g
                - mu
        };
        let dp = |g: f64| {
            5.0 * g.powi(4) - 4.0 * (3.0 - mu) * g.powi(3) + 3.0 * (3.0 - 2.0 * mu) * g * g
                - 2.0 * mu * g
                + 2.0 * mu
        };
        let mut g = (mu / 3.0).cbrt();
        for _ in 0..50 {
            g -= p(g) / dp(g);
        }
        1.0 - mu - g
    }

    #[test]
    fn l1_matches_quintic_oracle() {
        let c = consts();
        let l = libration_points(&c).unwrap();
        let oracle = quintic_l1(c.mu);
        assert!((l[0][0] - oracle).abs() < 1e-11, "{} vs {}", l[0][0], oracle);
        assert!((l[0][0] - 0.8369).abs() < 1e-4);
    }

    #[test]
    fn equilibria_have_zero_derivative() {
        let c = consts();
        for p in libration_points(&c).unwrap() {
            let s = CrState::from_pos_vel(&p, &Vector3::zeros());
            let d = eom(&s, &c).unwrap();
            assert!(d.amax() < 1e-12, "{p:?} -> {d:?}");
        }
    }

    #[test]
    fn l4_is_equilateral() {
        let c = consts();
        let l = libration_points(&c).unwrap();
        assert!((l[3] - Vector3::new(0.5 - c.mu, 3f64.sqrt() / 2.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn jacobi_at_l1() {
        let c = consts();
        let l1 = libration_points(&c).unwrap()[0];
        let s = CrState::from_pos_vel(&l1, &Vector3::zeros());
        let jc = jacobi_constant(&s, &c).unwrap();
        assert!((jc - 3.188).abs() < 5e-4, "JC(L1) = {jc}");
        assert_eq!(jc, 2.0 * pseudo_potential(&l1, c.mu).unwrap());
    }

    #[test]
    fn moon_center_is_singular() {
        let c = consts();
        let s = CrState::new(1.0 - c.mu, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(eom(&s, &c), Err(Cr3bpError::Singularity { .. })));
    }

    #[test]
    fn eom_matches_finite_difference_of_potential() {
        let c = consts();
        let s = CrState::new(0.5, 0.1, 0.05, 0.01, -0.02, 0.003);
        let d = eom(&s, &c).unwrap();
        // Central differences of U plus Coriolis terms, evaluated independently.
        let h = 1e-5;
        let u = |dx: f64, dy: f64, dz: f64| {
            let (x, y, z) = (s.x + dx, s.y + dy, s.z + dz);
            let d1 = ((x + c.mu).powi(2) + y * y + z * z).sqrt();
            let r1 = ((x - 1.0 + c.mu).powi(2) + y * y + z * z).sqrt();
            0.5 * (x * x + y * y) + (1.0 - c.mu) / d1 + c.mu / r1
        };
        // Richardson-extrapolated 4th-order stencil keeps truncation well below 1e-12.
        let grad = |f: &dyn Fn(f64) -> f64| {
            (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
        };
        let ux = grad(&|e| u(e, 0.0, 0.0));
        let uy = grad(&|e| u(0.0, e, 0.0));
        let uz = grad(&|e| u(0.0, 0.0, e));
        let expect = [s.vx, s.vy, s.vz, ux + 2.0 * s.vy, uy - 2.0 * s.vx, uz];
        for i in 0..6 {
            assert!((d[i] - expect[i]).abs() < 1e-10, "component {i}: {} vs {}", d[i], expect[i]);
        }
    }

    #[test]
    fn zero_span_propagation_is_identity() {
        let c = consts();
        let s = CrState::new(0.8, 0.0, 0.1, 0.0, 0.2, 0.0);
        let tr = propagate(&s, 0.0, 0.0, 1e-10, &c).unwrap();
        assert_eq!(tr.final_state(), s);
        let stm = propagate_with_stm(&s, 0.0, 0.0, 1e-10, &c).unwrap();
        assert_eq!(stm.phi, Matrix6::identity());
    }

    #[test]
    fn stm_matches_central_differences() {
        let c = consts();
        let s = CrState::new(0.85, 0.02, 0.17, 0.01, 0.26, -0.01);
        let t = 1.2;
        let stm = propagate_with_stm(&s, 0.0, t, 1e-12, &c).unwrap();
        let eps = 1e-7;
        for j in 0..6 {
            let mut p = s.to_vector();
            let mut m = s.to_vector();
            p[j] += eps;
            m[j] -= eps;
            let fp = rk4_final(&CrState::from_vector(&p), t, &c);
            let fm = rk4_final(&CrState::from_vector(&m), t, &c);
            let col = (fp.to_vector() - fm.to_vector()) / (2.0 * eps);
            let err = (col - stm.phi.column(j)).amax();
            assert!(err < 1e-5, "column {j}: {err}");
        }
    }

    #[test]
    fn zvs_root_residual_and_open_region() {
        let c = consts();
        let dir = Vector3::new(1.0, 0.0, 0.0);
        let rho = zvs_radius(&dir, 10.0, &c).unwrap().expect("crossing toward the Moon");
        let u = pseudo_potential(&(dir * rho), c.mu).unwrap();
        assert!((2.0 * u - 10.0).abs() <= 1e-10);
        assert!(zvs_radius(&dir, 2.5, &c).unwrap().is_none());
    }

    #[test]
    fn zvs_agrees_with_dense_ray_scan() {
        let c = consts();
        for (dir, jc) in [
            (Vector3::new(1.0, 0.0, 0.0), 10.0),
            (Vector3::new(0.0, 1.0, 0.0), 3.1),
            (Vector3::new(0.6, 0.0, 0.8), 3.5),
            (Vector3::new(-1.0, 0.0, 0.0), 2.5),
        ] {
            let mut scan = None;
            let n = 180_000;
            let mut prev = None::<f64>;
            for i in 0..=n {
                let rho = 0.2 + 1.8 * i as f64 / n as f64;
                let Ok(u) = pseudo_potential(&(dir * rho), c.mu) else { continue };
                let g = 2.0 * u - jc;
                if let Some(p) = prev {
                    if p.signum() != g.signum() {
                        scan = Some(rho);
                        break;
                    }
                }
                prev = Some(g);
            }
            let got = zvs_radius(&dir, jc, &c).unwrap();
            match (scan, got) {
                (None, None) => {}
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-4, "{dir:?} {jc}: {a} vs {b}"),
                other => panic!("{dir:?} {jc}: {other:?}"),
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn eom_is_z_symmetric(
            x in -1.5f64..1.5, y in -1.0f64..1.0, z in -0.5f64..0.5,
            vx in -1.0f64..1.0, vy in -1.0f64..1.0, vz in -1.0f64..1.0,
        ) {
            let c = consts();
            let s = CrState::new(x, y, z, vx, vy, vz);
            prop_assume!(eom(&s, &c).is_ok());
            let d = eom(&s, &c).unwrap();
            let m = eom(&s.mirrored_z(), &c).unwrap();
            for i in [0usize, 1, 3, 4] {
                prop_assert!((d[i] - m[i]).abs() <= 1e-12 * d[i].abs().max(1.0));
            }
            for i in [2usize, 5] {
                prop_assert!((d[i] + m[i]).abs() <= 1e-12 * d[i].abs().max(1.0));
            }
        }

        #[test]
        fn stm_tracks_finite_differences_on_random_states(
            x in 0.75f64..0.95, z in -0.2f64..0.2, vy in -0.3f64..0.3, t in 0.2f64..1.0,
        ) {
            let c = consts();
            let s = CrState::new(x, 0.0, z, 0.0, vy, 0.0);
            let tr = propagate(&s, 0.0, t, 1e-12, &c).unwrap();
            let closest = (0..=200)
                .map(|i| (tr.state_at(t * i as f64 / 200.0).unwrap().position() - c.moon()).norm())
                .fold(f64::INFINITY, f64::min);
            prop_assume!(closest > 0.05);
            let stm = propagate_with_stm(&s, 0.0, t, 1e-12, &c).unwrap();
            let eps = 1e-6;
            for j in 0..6 {
                let mut p = s.to_vector();
                let mut m = s.to_vector();
                p[j] += eps;
                m[j] -= eps;
                let fp = rk4_final(&CrState::from_vector(&p), t, &c);
                let fm = rk4_final(&CrState::from_vector(&m), t, &c);
                let col = (fp.to_vector() - fm.to_vector()) / (2.0 * eps);
                let scale = stm.phi.column(j).amax().max(1.0);
                prop_assert!((col - stm.phi.column(j)).amax() <= 1e-5 * scale);
            }
        }
    }
}
