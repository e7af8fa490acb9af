//! C ABI over the core crate.
//!
//! Every function returns a [`CsdaStatus`]; results go through out-pointers.
//! Handles are opaque and must be released with the matching `*_free`.
//! The message for the most recent failure on the calling thread is
//! available from [`csda_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cislunar_sda::config::RunConfig;
use cislunar_sda::cr3bp::{self, CrState, SystemConstants, Trajectory};
use cislunar_sda::orbits::OrbitLibrary;
use cislunar_sda::photometry::{self, RadiometryConstants, SphereTarget};
use nalgebra::Vector3;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ConfigError = 3,
    RuntimeError = 4,
    IndexOutOfRange = 5,
    /// The target is not illuminated or the geometry is degenerate.
    NotVisible = 6,
    Panic = 7,
}

/// Parsed run configuration.
pub struct CsdaConfig {
    inner: RunConfig,
}

/// Corrected periodic-orbit library.
pub struct CsdaLibrary {
    inner: OrbitLibrary,
}

/// Propagated arc with dense output.
pub struct CsdaTrajectory {
    inner: Trajectory,
}

/// One library member. Nondimensional rotating-frame units.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CsdaOrbit {
    /// x, y, z, vx, vy, vz at the perpendicular x-axis crossing.
    pub state: [f64; 6],
    pub period: f64,
    pub stability_index: f64,
    pub jacobi: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: CsdaStatus, msg: impl std::fmt::Display) -> CsdaStatus {
    set_error(msg.to_string());
    status
}

fn guard(f: impl FnOnce() -> CsdaStatus) -> CsdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == CsdaStatus::Ok {
                set_error("");
            }
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(CsdaStatus::Panic, msg)
        }
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(CsdaStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

unsafe fn read_state(p: *const f64) -> CrState {
    let s = std::slice::from_raw_parts(p, 6);
    CrState::new(s[0], s[1], s[2], s[3], s[4], s[5])
}

unsafe fn write_state(s: &CrState, out: *mut f64) {
    let v = s.to_vector();
    std::slice::from_raw_parts_mut(out, 6).copy_from_slice(v.as_slice());
}

fn constants(cfg: &CsdaConfig) -> SystemConstants {
    cfg.inner.constants.system()
}

/// Copy `s` into `buf` as a NUL-terminated string, truncating to fit.
/// Returns the buffer size needed for the full string.
unsafe fn copy_str(s: &str, buf: *mut c_char, len: usize) -> usize {
    if !buf.is_null() && len > 0 {
        let n = s.len().min(len - 1);
        ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, buf, n);
        *buf.add(n) = 0;
    }
    s.len() + 1
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn csda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failed call on this thread. Writes at most `len`
/// bytes including the terminator; returns the size needed.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn csda_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| copy_str(&e.borrow(), buf, len))
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csda_config_default(out: *mut *mut CsdaConfig) -> CsdaStatus {
    guard(|| {
        non_null!(out);
        *out = Box::into_raw(Box::new(CsdaConfig { inner: RunConfig::default() }));
        CsdaStatus::Ok
    })
}

/// Parse and validate a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csda_config_from_toml(toml: *const c_char, out: *mut *mut CsdaConfig) -> CsdaStatus {
    guard(|| {
        non_null!(toml, out);
        let text = match CStr::from_ptr(toml).to_str() {
            Ok(t) => t,
            Err(e) => return fail(CsdaStatus::InvalidArgument, e),
        };
        match RunConfig::from_toml(text) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(CsdaConfig { inner: cfg }));
                CsdaStatus::Ok
            }
            Err(e) => fail(CsdaStatus::ConfigError, format!("{e}: {}", source_chain(&e))),
        }
    })
}

fn source_chain(e: &dyn std::error::Error) -> String {
    let mut parts = Vec::new();
    let mut cur = e.source();
    while let Some(s) = cur {
        parts.push(s.to_string());
        cur = s.source();
    }
    parts.join(": ")
}

/// # Safety
/// `cfg` must be null or a handle from `csda_config_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn csda_config_free(cfg: *mut CsdaConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Master seed of the configuration.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn csda_config_seed(cfg: *const CsdaConfig, out: *mut u64) -> CsdaStatus {
    guard(|| {
        non_null!(cfg, out);
        *out = (*cfg).inner.seed;
        CsdaStatus::Ok
    })
}

/// Jacobi constant of a nondimensional state.
///
/// # Safety
/// `state` must point to 6 doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn csda_jacobi_constant(cfg: *const CsdaConfig, state: *const f64, out: *mut f64) -> CsdaStatus {
    guard(|| {
        non_null!(cfg, state, out);
        match cr3bp::jacobi_constant(&read_state(state), &constants(&*cfg)) {
            Ok(jc) => {
                *out = jc;
                CsdaStatus::Ok
            }
            Err(e) => fail(CsdaStatus::InvalidArgument, e),
        }
    })
}

/// Propagate `state` from `t0` to `tf` (either direction) at tolerance `tol`.
///
/// # Safety
/// `state` must point to 6 doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn csda_propagate(
    cfg: *const CsdaConfig,
    state: *const f64,
    t0: f64,
    tf: f64,
    tol: f64,
    out: *mut *mut CsdaTrajectory,
) -> CsdaStatus {
    guard(|| {
        non_null!(cfg, state, out);
        match cr3bp::propagate(&read_state(state), t0, tf, tol, &constants(&*cfg)) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(CsdaTrajectory { inner: t }));
                CsdaStatus::Ok
            }
            Err(e) => fail(CsdaStatus::RuntimeError, e),
        }
    })
}

/// State at time `t` inside the propagated span.
///
/// # Safety
/// `out` must point to 6 writable doubles; `traj` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn csda_trajectory_state(traj: *const CsdaTrajectory, t: f64, out: *mut f64) -> CsdaStatus {
    guard(|| {
        non_null!(traj, out);
        let tr = &(*traj).inner;
        match tr.state_at(t) {
            Some(s) => {
                write_state(&s, out);
                CsdaStatus::Ok
            }
            None => fail(
                CsdaStatus::InvalidArgument,
                format!("t = {t} outside [{}, {}]", tr.t0().min(tr.tf()), tr.t0().max(tr.tf())),
            ),
        }
    })
}

/// State at the end of the propagated span.
///
/// # Safety
/// `out` must point to 6 writable doubles; `traj` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn csda_trajectory_final(traj: *const CsdaTrajectory, out: *mut f64) -> CsdaStatus {
    guard(|| {
        non_null!(traj, out);
        write_state(&(*traj).inner.final_state(), out);
        CsdaStatus::Ok
    })
}

/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csda_trajectory_free(traj: *mut CsdaTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Build the orbit library described by the configuration's `[library]` table.
/// Seeds that fail to correct are skipped.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn csda_library_build(cfg: *const CsdaConfig, out: *mut *mut CsdaLibrary) -> CsdaStatus {
    guard(|| {
        non_null!(cfg, out);
        let cfg = &(*cfg).inner;
        let seeds = match cfg.library.seeds() {
            Ok(s) => s,
            Err(e) => return fail(CsdaStatus::ConfigError, e),
        };
        let (lib, _) = cfg.library.build(&seeds, &cfg.constants.system());
        *out = Box::into_raw(Box::new(CsdaLibrary { inner: lib }));
        CsdaStatus::Ok
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn csda_library_len(lib: *const CsdaLibrary, out: *mut usize) -> CsdaStatus {
    guard(|| {
        non_null!(lib, out);
        *out = (*lib).inner.orbits.len();
        CsdaStatus::Ok
    })
}

unsafe fn orbit_at<'a>(lib: *const CsdaLibrary, index: usize) -> Result<&'a cislunar_sda::orbits::PeriodicOrbit, CsdaStatus> {
    let orbits = &(*lib).inner.orbits;
    orbits
        .get(index)
        .ok_or_else(|| fail(CsdaStatus::IndexOutOfRange, format!("index {index} ≥ {}", orbits.len())))
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn csda_library_orbit(lib: *const CsdaLibrary, index: usize, out: *mut CsdaOrbit) -> CsdaStatus {
    guard(|| {
        non_null!(lib, out);
        let o = match orbit_at(lib, index) {
            Ok(o) => o,
            Err(s) => return s,
        };
        let mut rec = CsdaOrbit {
            period: o.period,
            stability_index: o.stability_index,
            jacobi: o.jc,
            ..Default::default()
        };
        rec.state.copy_from_slice(o.ic.to_vector().as_slice());
        *out = rec;
        CsdaStatus::Ok
    })
}

/// Family tag of a library member (e.g. `l2_halo_south`), NUL-terminated
/// and truncated to `len` bytes. `needed` receives the full size.
///
/// # Safety
/// `buf` must point to `len` writable bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn csda_library_family(
    lib: *const CsdaLibrary,
    index: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> CsdaStatus {
    guard(|| {
        non_null!(lib, buf);
        let o = match orbit_at(lib, index) {
            Ok(o) => o,
            Err(s) => return s,
        };
        let n = copy_str(o.family.tag(), buf, len);
        if !needed.is_null() {
            *needed = n;
        }
        CsdaStatus::Ok
    })
}

/// # Safety
/// `lib` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csda_library_free(lib: *mut CsdaLibrary) {
    if !lib.is_null() {
        drop(Box::from_raw(lib));
    }
}

/// Visual magnitude of a diffuse sphere (C_d = 0.3) of radius `radius_m`.
/// `r_ot` is observer→target and `r_st` Sun→target, both nondimensional.
///
/// # Safety
/// `r_ot` and `r_st` must point to 3 doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn csda_sphere_magnitude(
    cfg: *const CsdaConfig,
    r_ot: *const f64,
    r_st: *const f64,
    radius_m: f64,
    out: *mut f64,
) -> CsdaStatus {
    guard(|| {
        non_null!(cfg, r_ot, r_st, out);
        if !(radius_m > 0.0) {
            return fail(CsdaStatus::InvalidArgument, format!("radius {radius_m} must be positive"));
        }
        let v = |p: *const f64| {
            let s = std::slice::from_raw_parts(p, 3);
            Vector3::new(s[0], s[1], s[2])
        };
        let target = SphereTarget { radius_m, ..Default::default() };
        match photometry::sphere_magnitude(&target, &v(r_ot), &v(r_st), &RadiometryConstants::default(), &constants(&*cfg)) {
            Some(m) => {
                *out = m;
                CsdaStatus::Ok
            }
            None => fail(CsdaStatus::NotVisible, "zero range or unilluminated phase"),
        }
    })
}
