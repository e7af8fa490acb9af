//! Apparent magnitude from a faceted Cook-Torrance model or an analytic
//! Lambertian sphere, Sun geometry in the rotating frame, and visibility gating.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Read;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cr3bp::SystemConstants;

#[derive(Debug, Error)]
pub enum PhotometryError {
    #[error("invalid material: {0}")]
    InvalidMaterial(String),
    #[error("degenerate facet {index}: {reason}")]
    DegenerateFacet { index: usize, reason: String },
    #[error("epoch {jd} outside ephemeris table [{first}, {last}]")]
    EpochOutOfRange { jd: f64, first: f64, last: f64 },
    #[error("epoch {jd} precedes the scenario epoch {epoch}")]
    EpochBeforeStart { jd: f64, epoch: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("table: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, PhotometryError>;

/// Scenario start, 2024-10-01 00:00:00 UT.
pub const INITIAL_EPOCH_JD: f64 = 2_460_584.5;
pub const AU_KM: f64 = 1.496e8;
const SIDEREAL_YEAR_S: f64 = 365.256_363 * 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiometryConstants {
    /// Apparent solar magnitude in the sensor band.
    pub m_sun: f64,
    /// Band-integrated solar irradiance at 1 AU (W/m²).
    pub i_sun: f64,
}

impl Default for RadiometryConstants {
    fn default() -> Self {
        Self {
            m_sun: -26.74,
            i_sun: 455.0,
        }
    }
}

impl RadiometryConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.i_sun > 0.0) || !self.m_sun.is_finite() {
            return Err(PhotometryError::InvalidArgument(format!(
                "radiometry constants must be finite with i_sun > 0 (got {self:?})"
            )));
        }
        Ok(())
    }

    /// Magnitude of a received irradiance, `None` when nothing is received.
    pub fn magnitude_from_flux(&self, flux: f64) -> Option<f64> {
        magnitude_from_ratio(flux / self.i_sun, self.m_sun)
    }
}

fn magnitude_from_ratio(ratio: f64, m_sun: f64) -> Option<f64> {
    (ratio > 0.0 && ratio.is_finite()).then(|| m_sun - 2.5 * ratio.log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    /// Diffuse albedo ρ.
    pub albedo: f64,
    pub d: f64,
    pub s: f64,
    pub delta_rms: f64,
    pub f0: f64,
}

impl Default for Material {
    fn default() -> Self {
        Self {
            albedo: 0.3,
            d: 0.7,
            s: 0.3,
            delta_rms: 0.2,
            f0: 0.1,
        }
    }
}

impl Material {
    pub fn diffuse(albedo: f64) -> Self {
        Self {
            albedo,
            d: 1.0,
            s: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PhotometryError::InvalidMaterial(format!("{m} ({self:?})")));
        if !(0.0..=1.0).contains(&self.albedo) {
            return bad("albedo must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.d) || !(0.0..=1.0).contains(&self.s) || (self.d + self.s - 1.0).abs() > 1e-9 {
            return bad("weights must satisfy d + s = 1");
        }
        if !(self.delta_rms > 0.0) || !self.delta_rms.is_finite() {
            return bad("roughness must be positive");
        }
        if !(0.0..1.0).contains(&self.f0) {
            return bad("normal reflectance must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Facet {
    /// Body-frame vertices (m).
    pub vertices: [Vector3<f64>; 3],
    pub area: f64,
    pub normal: Vector3<f64>,
    pub x_b: Vector3<f64>,
    pub y_b: Vector3<f64>,
    pub material: Material,
}

impl Facet {
    /// Facet from counter-clockwise vertices; the normal follows the right-hand rule.
    pub fn from_vertices(vertices: [Vector3<f64>; 3], material: Material) -> Option<Self> {
        let e1 = vertices[1] - vertices[0];
        let e2 = vertices[2] - vertices[0];
        let n = e1.cross(&e2);
        let norm = n.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return None;
        }
        let normal = n / norm;
        let x_b = e1.normalize();
        Some(Self {
            vertices,
            area: 0.5 * norm,
            normal,
            x_b,
            y_b: normal.cross(&x_b),
            material,
        })
    }

    pub fn centroid(&self) -> Vector3<f64> {
        (self.vertices[0] + self.vertices[1] + self.vertices[2]) / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetMesh {
    pub facets: Vec<Facet>,
}

impl FacetMesh {
    pub fn validate(&self) -> Result<()> {
        for (index, f) in self.facets.iter().enumerate() {
            if !(f.area > 0.0) {
                return Err(PhotometryError::DegenerateFacet {
                    index,
                    reason: "area must be positive".into(),
                });
            }
            if (f.normal.norm() - 1.0).abs() > 1e-9 {
                return Err(PhotometryError::DegenerateFacet {
                    index,
                    reason: "normal must be unit length".into(),
                });
            }
            f.material.validate()?;
        }
        Ok(())
    }

    pub fn total_area(&self) -> f64 {
        self.facets.iter().map(|f| f.area).sum()
    }

    /// Radius of the sphere with the same surface area.
    pub fn equal_area_radius(&self) -> f64 {
        (self.total_area() / (4.0 * PI)).sqrt()
    }

    /// Read a triangle list `v1x,v1y,v1z,v2x,…,v3z,albedo,d,s,delta_rms,f0`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            v1x: f64,
            v1y: f64,
            v1z: f64,
            v2x: f64,
            v2y: f64,
            v2z: f64,
            v3x: f64,
            v3y: f64,
            v3z: f64,
            albedo: f64,
            d: f64,
            s: f64,
            delta_rms: f64,
            f0: f64,
        }
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(r);
        let mut facets = Vec::new();
        for (index, row) in rdr.deserialize().enumerate() {
            let row: Row = row?;
            let material = Material {
                albedo: row.albedo,
                d: row.d,
                s: row.s,
                delta_rms: row.delta_rms,
                f0: row.f0,
            };
            let verts = [
                Vector3::new(row.v1x, row.v1y, row.v1z),
                Vector3::new(row.v2x, row.v2y, row.v2z),
                Vector3::new(row.v3x, row.v3y, row.v3z),
            ];
            let facet = Facet::from_vertices(verts, material).ok_or_else(|| PhotometryError::DegenerateFacet {
                index,
                reason: "collinear vertices".into(),
            })?;
            facets.push(facet);
        }
        let mesh = Self { facets };
        mesh.validate()?;
        Ok(mesh)
    }
}

/// Icosahedron refined `subdivisions` times, vertices projected onto the sphere.
pub fn icosphere_mesh(radius: f64, subdivisions: u32, material: Material) -> Result<FacetMesh> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(PhotometryError::InvalidArgument(format!("radius {radius} must be positive")));
    }
    if subdivisions > 7 {
        return Err(PhotometryError::InvalidArgument(format!(
            "subdivision level {subdivisions} too large"
        )));
    }
    material.validate()?;
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let facets = faces
        .iter()
        .map(|&[a, b, c]| {
            let tri = [verts[a] * radius, verts[b] * radius, verts[c] * radius];
            let mut f = Facet::from_vertices(tri, material).expect("icosphere faces are non-degenerate");
            if f.normal.dot(&f.centroid()) < 0.0 {
                f = Facet::from_vertices([tri[0], tri[2], tri[1]], material).expect("non-degenerate");
            }
            f
        })
        .collect();
    Ok(FacetMesh { facets })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereTarget {
    pub radius_m: f64,
    pub c_d: f64,
}

impl Default for SphereTarget {
    fn default() -> Self {
        Self {
            radius_m: 1.0,
            c_d: 0.3,
        }
    }
}

impl SphereTarget {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_m > 0.0) || !(0.0..=1.0).contains(&self.c_d) {
            return Err(PhotometryError::InvalidArgument(format!("invalid sphere target {self:?}")));
        }
        Ok(())
    }
}

/// Illumination and viewing directions for a facet (unit vectors, same frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewGeometry {
    /// Facet → Sun.
    pub l: Vector3<f64>,
    /// Facet → observer.
    pub v: Vector3<f64>,
    pub h: Vector3<f64>,
    /// Observer–object distance (m).
    pub range_m: f64,
}

impl ViewGeometry {
    /// `None` when L and V are opposite (half-vector undefined) or inputs are degenerate.
    pub fn new(to_sun: &Vector3<f64>, to_observer: &Vector3<f64>, range_m: f64) -> Option<Self> {
        let l = to_sun.try_normalize(0.0)?;
        let v = to_observer.try_normalize(0.0)?;
        let h = (l + v).try_normalize(1e-15)?;
        (range_m > 0.0).then_some(Self { l, v, h, range_m })
    }

    /// Angle between facet normal and the half-vector.
    pub fn phi(&self, normal: &Vector3<f64>) -> f64 {
        normal.dot(&self.h).clamp(-1.0, 1.0).acos()
    }
}

pub fn beckmann(cos_phi: f64, delta_rms: f64) -> f64 {
    let c2 = cos_phi * cos_phi;
    let tan2 = (1.0 - c2) / c2;
    (-tan2 / (delta_rms * delta_rms)).exp() / (delta_rms * delta_rms * c2 * c2)
}

/// Shadowing/masking term.
pub fn attenuation(n: &Vector3<f64>, g: &ViewGeometry) -> f64 {
    let nh = n.dot(&g.h);
    let hv = g.h.dot(&g.v);
    let masking = 2.0 * nh * n.dot(&g.v) / hv;
    let shadowing = 2.0 * nh * n.dot(&g.l) / hv;
    1f64.min(masking).min(shadowing)
}

pub fn fresnel(q: f64, f0: f64) -> f64 {
    let sf = f0.sqrt();
    let b = (1.0 + sf) / (1.0 - sf);
    // Square root of (q² − 1) + b²; without it F does not reduce to F0 at q = 1.
    let p = ((q * q - 1.0) + b * b).sqrt();
    let ratio = (q * (p + q) - 1.0) / (q * (p - q) + 1.0);
    (p - q).powi(2) / (2.0 * (p + q).powi(2)) * (1.0 + ratio * ratio)
}

/// Specular reflectance ρ_s; zero for back-facing or unlit facets.
pub fn specular_reflectance(n: &Vector3<f64>, g: &ViewGeometry, m: &Material) -> f64 {
    let nl = n.dot(&g.l);
    let nv = n.dot(&g.v);
    if nl <= 0.0 || nv <= 0.0 {
        return 0.0;
    }
    let d_b = beckmann(n.dot(&g.h).clamp(-1.0, 1.0), m.delta_rms);
    let f = fresnel(g.v.dot(&g.h), m.f0);
    attenuation(n, g) * d_b * f / (PI * nl * nv)
}

/// Total Cook-Torrance reflectance ρ_t = d·ρ/π + s·ρ_s; zero unless lit and viewed.
pub fn cook_torrance_facet(n: &Vector3<f64>, g: &ViewGeometry, m: &Material) -> f64 {
    if n.dot(&g.l) <= 0.0 || n.dot(&g.v) <= 0.0 {
        return 0.0;
    }
    let rho_s = if m.s > 0.0 { specular_reflectance(n, g, m) } else { 0.0 };
    m.d * m.albedo / PI + m.s * rho_s
}

/// Received irradiance relative to I_sun, Σ A ρ_t (N·L)(N·V) / r².
pub fn facet_flux_ratio(
    mesh: &FacetMesh,
    attitude: &UnitQuaternion<f64>,
    pos_target: &Vector3<f64>,
    pos_observer: &Vector3<f64>,
    pos_sun: &Vector3<f64>,
    c: &SystemConstants,
) -> f64 {
    let to_obs = pos_observer - pos_target;
    let range_m = to_obs.norm() * c.length_unit_m();
    let Some(g) = ViewGeometry::new(&(pos_sun - pos_target), &to_obs, range_m) else {
        return 0.0;
    };
    // Express the view geometry in the body frame once instead of rotating each normal.
    let inv = attitude.inverse();
    let Some(gb) = ViewGeometry::new(&(inv * g.l), &(inv * g.v), range_m) else {
        return 0.0;
    };
    let sum: f64 = mesh
        .facets
        .iter()
        .map(|f| {
            let nl = f.normal.dot(&gb.l);
            let nv = f.normal.dot(&gb.v);
            if nl <= 0.0 || nv <= 0.0 {
                0.0
            } else {
                f.area * cook_torrance_facet(&f.normal, &gb, &f.material) * nl * nv
            }
        })
        .sum();
    sum / (range_m * range_m)
}

/// Apparent magnitude of a faceted body; `None` when no lit facet faces the observer.
pub fn facet_magnitude(
    mesh: &FacetMesh,
    attitude: &UnitQuaternion<f64>,
    pos_target: &Vector3<f64>,
    pos_observer: &Vector3<f64>,
    pos_sun: &Vector3<f64>,
    rad: &RadiometryConstants,
    c: &SystemConstants,
) -> Option<f64> {
    let ratio = facet_flux_ratio(mesh, attitude, pos_target, pos_observer, pos_sun, c);
    magnitude_from_ratio(ratio, rad.m_sun)
}

/// Solar phase angle from observer→target and Sun→target vectors.
pub fn phase_angle(r_ot: &Vector3<f64>, r_st: &Vector3<f64>) -> f64 {
    (r_ot.dot(r_st) / (r_ot.norm() * r_st.norm())).clamp(-1.0, 1.0).acos()
}

pub fn lambert_phase(alpha: f64) -> f64 {
    let a = alpha.clamp(0.0, PI);
    a.sin() + (PI - a) * a.cos()
}

/// Analytic Lambertian-sphere magnitude. `r_ot` and `r_st` are nondimensional.
pub fn sphere_magnitude(
    target: &SphereTarget,
    r_ot: &Vector3<f64>,
    r_st: &Vector3<f64>,
    rad: &RadiometryConstants,
    c: &SystemConstants,
) -> Option<f64> {
    let range_m = r_ot.norm() * c.length_unit_m();
    if !(range_m > 0.0) || !(r_st.norm() > 0.0) {
        return None;
    }
    let phi = lambert_phase(phase_angle(r_ot, r_st));
    let ratio = 2.0 * target.c_d * target.radius_m.powi(2) * phi / (3.0 * PI * range_m * range_m);
    // Φ(π) evaluates to ~1e-16 rather than zero.
    if phi <= 1e-12 {
        return None;
    }
    magnitude_from_ratio(ratio, rad.m_sun)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisibilityPolicy {
    pub mag_threshold: f64,
    pub sun_excl_deg: f64,
    pub moon_excl_deg: f64,
    pub earth_excl_deg: f64,
    pub fov_deg: f64,
}

impl Default for VisibilityPolicy {
    fn default() -> Self {
        Self {
            mag_threshold: 18.0,
            sun_excl_deg: 35.0,
            moon_excl_deg: 5.0,
            earth_excl_deg: 15.0,
            fov_deg: 3.0,
        }
    }
}

impl VisibilityPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sun exclusion", self.sun_excl_deg),
            ("moon exclusion", self.moon_excl_deg),
            ("earth exclusion", self.earth_excl_deg),
            ("field of view", self.fov_deg),
        ] {
            if !(v > 0.0 && v < 180.0) {
                return Err(PhotometryError::InvalidArgument(format!("{name} angle {v} outside (0, 180)")));
            }
        }
        if !self.mag_threshold.is_finite() {
            return Err(PhotometryError::InvalidArgument("magnitude threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Visible,
    Brightness,
    SunExclusion,
    MoonExclusion,
    EarthExclusion,
    FieldOfView,
}

impl Visibility {
    pub fn is_visible(self) -> bool {
        self == Visibility::Visible
    }

    pub fn reason(self) -> &'static str {
        match self {
            Visibility::Visible => "visible",
            Visibility::Brightness => "brightness",
            Visibility::SunExclusion => "sun exclusion",
            Visibility::MoonExclusion => "moon exclusion",
            Visibility::EarthExclusion => "earth exclusion",
            Visibility::FieldOfView => "field of view",
        }
    }
}

fn angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let n = a.norm() * b.norm();
    if n == 0.0 {
        return 0.0;
    }
    (a.dot(b) / n).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Brightness threshold and Sun/Moon/Earth exclusion cones, checked in that order.
#[allow(clippy::too_many_arguments)]
pub fn visibility_check(
    mag: Option<f64>,
    target_dir: &Vector3<f64>,
    sun_pos: &Vector3<f64>,
    moon_pos: &Vector3<f64>,
    earth_pos: &Vector3<f64>,
    observer_pos: &Vector3<f64>,
    policy: &VisibilityPolicy,
) -> Visibility {
    match mag {
        Some(m) if m <= policy.mag_threshold => {}
        _ => return Visibility::Brightness,
    }
    if angle_deg(target_dir, &(sun_pos - observer_pos)) < policy.sun_excl_deg {
        return Visibility::SunExclusion;
    }
    if angle_deg(target_dir, &(moon_pos - observer_pos)) < policy.moon_excl_deg {
        return Visibility::MoonExclusion;
    }
    if angle_deg(target_dir, &(earth_pos - observer_pos)) < policy.earth_excl_deg {
        return Visibility::EarthExclusion;
    }
    Visibility::Visible
}

/// True when `target_dir` lies inside the camera cone (full angle `fov_deg`) around `boresight`.
pub fn within_fov(target_dir: &Vector3<f64>, boresight: &Vector3<f64>, policy: &VisibilityPolicy) -> bool {
    angle_deg(target_dir, boresight) <= 0.5 * policy.fov_deg
}

/// Sun ephemeris in the rotating frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SunModel {
    /// Circular in-plane Sun at 1 AU rotating at the synodic rate.
    Analytic { theta0: f64 },
    /// Linear interpolation of `(jd, position)` rows sorted by epoch.
    Table(Vec<(f64, Vector3<f64>)>),
}

impl Default for SunModel {
    fn default() -> Self {
        SunModel::Analytic { theta0: 0.0 }
    }
}

impl SunModel {
    pub fn read_table<R: Read>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            jd: f64,
            x: f64,
            y: f64,
            z: f64,
        }
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(r);
        let mut rows = Vec::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            rows.push((row.jd, Vector3::new(row.x, row.y, row.z)));
        }
        if rows.is_empty() {
            return Err(PhotometryError::InvalidArgument("empty ephemeris table".into()));
        }
        if rows.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(PhotometryError::InvalidArgument("ephemeris epochs must increase".into()));
        }
        Ok(SunModel::Table(rows))
    }

    /// Synodic rate of the Sun in the rotating frame (nondimensional, negative: clockwise).
    pub fn synodic_rate(c: &SystemConstants) -> f64 {
        2.0 * PI * c.t_star / SIDEREAL_YEAR_S - 1.0
    }

    pub fn distance_nd(c: &SystemConstants) -> f64 {
        AU_KM / c.l_star
    }

    /// Position at a Julian date (nondimensional rotating frame).
    pub fn position_jd(&self, jd: f64, c: &SystemConstants) -> Result<Vector3<f64>> {
        match self {
            SunModel::Analytic { theta0 } => {
                if jd < INITIAL_EPOCH_JD {
                    return Err(PhotometryError::EpochBeforeStart {
                        jd,
                        epoch: INITIAL_EPOCH_JD,
                    });
                }
                let t = c.seconds_to_nd((jd - INITIAL_EPOCH_JD) * 86_400.0);
                let theta = theta0 + Self::synodic_rate(c) * t;
                Ok(Vector3::new(theta.cos(), theta.sin(), 0.0) * Self::distance_nd(c))
            }
            SunModel::Table(rows) => {
                let first = rows[0].0;
                let last = rows[rows.len() - 1].0;
                if !(first..=last).contains(&jd) {
                    return Err(PhotometryError::EpochOutOfRange { jd, first, last });
                }
                let i = rows.partition_point(|r| r.0 <= jd);
                if i == 0 {
                    return Ok(rows[0].1);
                }
                let (ja, pa) = rows[i - 1];
                if i == rows.len() || ja == jd {
                    return Ok(pa);
                }
                let (jb, pb) = rows[i];
                let w = (jd - ja) / (jb - ja);
                Ok(pa + (pb - pa) * w)
            }
        }
    }

    /// Position at nondimensional time `t` after the scenario epoch.
    pub fn position(&self, t: f64, c: &SystemConstants) -> Result<Vector3<f64>> {
        self.position_jd(INITIAL_EPOCH_JD + c.nd_to_seconds(t) / 86_400.0, c)
    }
}
