//! Procedural synthetic scenes with an analytic ray-cast / occupancy oracle,
//! simulated LiDAR sweeps, and rasterized multi-view inverse-depth images.
//!
//! The camera rig exists only to render model inputs. Nothing downstream of
//! [`RenderedViews`] carries poses or intrinsics, which is what lets the
//! projection stay calibration-free.

use crate::geometry::{addv, dot, norm, scalev, sub, PointCloud, Ray, RoiBox, Vec3};
use crate::io::{self, IoError};
use crate::rng::derive_rng;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Ground planes are solid slabs of this thickness, so occupancy queries up
/// to τ = 0.1 m below the surface stay inside matter.
pub const GROUND_THICKNESS: f64 = 0.2;

pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    BadScene(String),
    #[error("LiDAR sweep produced no returns")]
    EmptySweep,
    #[error("camera keep set is empty")]
    EmptyKeepSet,
    #[error("camera index {index} out of range ({count} cameras)")]
    BadCameraIndex { index: usize, count: usize },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("scene JSON: {0}")]
    Json(#[from] serde_json::Error),
}

// ── Scene description ───────────────────────────────────────────────────────

/// Solid scene element. All coordinates in meters, ego frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    /// Axis-aligned closed box.
    Box { min: Vec3, max: Vec3 },
    /// Closed ball.
    Sphere { center: Vec3, radius: f64 },
    /// Horizontal slab solid for z in [z - GROUND_THICKNESS, z].
    GroundPlane { z: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarConfig {
    pub origin: Vec3,
    pub azimuth_count: usize,
    pub elevation_angles_deg: Vec<f64>,
    pub max_range: f64,
}

/// Pinhole camera: yaw about +z (0 = facing +x), pitch positive upward,
/// principal point at the image center, square pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub position: Vec3,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub focal_px: f64,
    pub height: usize,
    pub width: usize,
}

/// A complete synthetic scene. Serializes as a versioned JSON document:
/// `{"version":1,"primitives":[{"kind":"box",...},...],"lidar":{...},
/// "cameras":[...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub version: u32,
    pub primitives: Vec<Primitive>,
    pub lidar: LidarConfig,
    pub cameras: Vec<CameraConfig>,
}

impl SceneSpec {
    /// Structural checks: at least one primitive, a non-empty rig, every
    /// primitive overlapping the ROI, sane LiDAR parameters.
    pub fn validate(&self, roi: &RoiBox) -> Result<(), SimError> {
        if self.version != SCENE_VERSION {
            return Err(SimError::BadScene(format!(
                "unsupported scene version {} (expected {SCENE_VERSION})",
                self.version
            )));
        }
        if self.primitives.is_empty() {
            return Err(SimError::BadScene("no primitives".into()));
        }
        if self.cameras.is_empty() {
            return Err(SimError::BadScene("no cameras".into()));
        }
        if self.lidar.azimuth_count == 0
            || self.lidar.elevation_angles_deg.is_empty()
            || self.lidar.max_range <= 0.0
        {
            return Err(SimError::BadScene("empty LiDAR pattern".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let overlaps = match *p {
                Primitive::Box { min, max } => {
                    (0..3).all(|k| min[k] <= roi.max[k] && max[k] >= roi.min[k])
                }
                Primitive::Sphere { center, radius } => (0..3)
                    .all(|k| center[k] - radius <= roi.max[k] && center[k] + radius >= roi.min[k]),
                Primitive::GroundPlane { z } => {
                    z - GROUND_THICKNESS <= roi.max[2] && z >= roi.min[2]
                }
            };
            if !overlaps {
                return Err(SimError::BadScene(format!(
                    "primitive {i} does not intersect the ROI"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(IoError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(IoError::from)?;
        Ok(serde_json::from_str(&text)?)
    }
}

// ── Analytic oracle ──────────────────────────────────────────────────────────

fn cast_box(origin: Vec3, dir: Vec3, min: Vec3, max: Vec3) -> Option<f64> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for i in 0..3 {
        if dir[i].abs() < 1e-15 {
            if origin[i] < min[i] || origin[i] > max[i] {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((min[i] - origin[i]) / dir[i], (max[i] - origin[i]) / dir[i]);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_enter = t_enter.max(t0);
        t_exit = t_exit.min(t1);
    }
    (t_exit >= t_enter.max(0.0)).then_some(t_enter.max(0.0))
}

fn cast_sphere(origin: Vec3, dir: Vec3, center: Vec3, radius: f64) -> Option<f64> {
    let oc = sub(origin, center);
    let b = dot(oc, dir);
    let c = dot(oc, oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    let t1 = -b + sq;
    if t0 >= 0.0 {
        Some(t0)
    } else if t1 >= 0.0 {
        Some(t1)
    } else {
        None
    }
}

fn cast_slab_z(origin: Vec3, dir: Vec3, z_lo: f64, z_hi: f64) -> Option<f64> {
    if dir[2].abs() < 1e-15 {
        return (origin[2] >= z_lo && origin[2] <= z_hi).then_some(0.0);
    }
    let (mut t0, mut t1) = ((z_lo - origin[2]) / dir[2], (z_hi - origin[2]) / dir[2]);
    if t0 > t1 {
        std::mem::swap(&mut t0, &mut t1);
    }
    (t1 >= t0.max(0.0)).then_some(t0.max(0.0))
}

/// Exact nearest surface intersection across all primitives, or `None` when
/// the ray misses everything within the LiDAR max range.
pub fn cast(scene: &SceneSpec, ray: &Ray) -> Option<f64> {
    let mut best: Option<f64> = None;
    for p in &scene.primitives {
        let t = match *p {
            Primitive::Box { min, max } => cast_box(ray.origin, ray.direction, min, max),
            Primitive::Sphere { center, radius } => {
                cast_sphere(ray.origin, ray.direction, center, radius)
            }
            Primitive::GroundPlane { z } => {
                cast_slab_z(ray.origin, ray.direction, z - GROUND_THICKNESS, z)
            }
        };
        if let Some(t) = t {
            if t <= scene.lidar.max_range && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
    }
    best
}

/// True iff `p` lies inside (or on the surface of) any solid primitive.
pub fn occupied(scene: &SceneSpec, p: Vec3) -> bool {
    scene.primitives.iter().any(|prim| match *prim {
        Primitive::Box { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
        Primitive::Sphere { center, radius } => norm(sub(p, center)) <= radius,
        Primitive::GroundPlane { z } => p[2] >= z - GROUND_THICKNESS && p[2] <= z,
    })
}

// ── LiDAR simulation ────────────────────────────────────────────────────────

/// The sensor's full scan pattern: one unit ray per (azimuth, elevation),
/// azimuth-major, none carrying a hit distance.
pub fn scan_rays(lidar: &LidarConfig) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(lidar.azimuth_count * lidar.elevation_angles_deg.len());
    for az in 0..lidar.azimuth_count {
        let theta = 2.0 * std::f64::consts::PI * az as f64 / lidar.azimuth_count as f64;
        for &elev_deg in &lidar.elevation_angles_deg {
            let elev = elev_deg.to_radians();
            let dir = [
                elev.cos() * theta.cos(),
                elev.cos() * theta.sin(),
                elev.sin(),
            ];
            rays.push(Ray { origin: lidar.origin, direction: dir, hit_distance: None });
        }
    }
    rays
}

/// One ray per (azimuth, elevation) over the scan pattern; only returning
/// rays contribute points. Errors if the whole sweep misses.
pub fn simulate_lidar(scene: &SceneSpec) -> Result<PointCloud, SimError> {
    let mut points = Vec::new();
    for ray in scan_rays(&scene.lidar) {
        if let Some(d) = cast(scene, &ray) {
            if d > 1e-9 {
                points.push(ray.point_at(d));
            }
        }
    }
    if points.is_empty() {
        return Err(SimError::EmptySweep);
    }
    Ok(PointCloud::new(points, scene.lidar.origin))
}

// ── Camera rendering ────────────────────────────────────────────────────────

/// One camera's raster: inverse depth (1/m, 0 where nothing was hit) and a
/// 0/1 hit mask, both row-major H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRaster {
    pub height: usize,
    pub width: usize,
    pub inv_depth: Vec<f64>,
    pub mask: Vec<f64>,
}

impl ViewRaster {
    pub fn zeros(height: usize, width: usize) -> Self {
        ViewRaster {
            height,
            width,
            inv_depth: vec![0.0; height * width],
            mask: vec![0.0; height * width],
        }
    }
}

/// The model's whole input: per-camera rasters in fixed rig order, no
/// calibration fields.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedViews {
    pub cameras: Vec<ViewRaster>,
}

/// Orthonormal camera basis (forward, right, down) from yaw/pitch.
fn camera_basis(cam: &CameraConfig) -> (Vec3, Vec3, Vec3) {
    let (yaw, pitch) = (cam.yaw_deg.to_radians(), cam.pitch_deg.to_radians());
    let f = [pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin()];
    // right = forward × up, kept horizontal
    let r = [yaw.sin(), -yaw.cos(), 0.0];
    // down = forward × right
    let d = [
        f[1] * r[2] - f[2] * r[1],
        f[2] * r[0] - f[0] * r[2],
        f[0] * r[1] - f[1] * r[0],
    ];
    (f, r, d)
}

/// The world-space ray through pixel center (u, v).
pub fn pixel_ray(cam: &CameraConfig, u: usize, v: usize) -> Ray {
    let (fwd, right, down) = camera_basis(cam);
    let xc = (u as f64 + 0.5 - cam.width as f64 / 2.0) / cam.focal_px;
    let yc = (v as f64 + 0.5 - cam.height as f64 / 2.0) / cam.focal_px;
    let mut dir = addv(fwd, addv(scalev(right, xc), scalev(down, yc)));
    dir = scalev(dir, 1.0 / norm(dir));
    Ray { origin: cam.position, direction: dir, hit_distance: None }
}

/// Per-pixel analytic ray cast through the pinhole model.
pub fn render_views(scene: &SceneSpec) -> RenderedViews {
    let cameras = scene
        .cameras
        .par_iter()
        .map(|cam| {
            let mut raster = ViewRaster::zeros(cam.height, cam.width);
            for v in 0..cam.height {
                for u in 0..cam.width {
                    let ray = pixel_ray(cam, u, v);
                    if let Some(d) = cast(scene, &ray) {
                        if d > 1e-9 {
                            raster.inv_depth[v * cam.width + u] = 1.0 / d;
                            raster.mask[v * cam.width + u] = 1.0;
                        }
                    }
                }
            }
            raster
        })
        .collect();
    RenderedViews { cameras }
}

/// Replace every camera not in `keep` with an all-zero raster. Input arity
/// and order are preserved — the model's camera slots are fixed.
pub fn drop_cameras(views: &RenderedViews, keep: &[usize]) -> Result<RenderedViews, SimError> {
    if keep.is_empty() {
        return Err(SimError::EmptyKeepSet);
    }
    let count = views.cameras.len();
    for &i in keep {
        if i >= count {
            return Err(SimError::BadCameraIndex { index: i, count });
        }
    }
    let cameras = views
        .cameras
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if keep.contains(&i) {
                r.clone()
            } else {
                ViewRaster::zeros(r.height, r.width)
            }
        })
        .collect();
    Ok(RenderedViews { cameras })
}

// ── VIEW binary format ──────────────────────────────────────────────────────

const VIEW_MAGIC: &[u8; 4] = b"VIEW";

impl RenderedViews {
    /// VIEW: header | camera count u32 | per-camera H,W u32 pairs |
    /// per-camera inverse-depth plane then mask plane, f32 LE row-major.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), IoError> {
        io::write_header(w, VIEW_MAGIC, 1)?;
        w.write_u32::<LittleEndian>(self.cameras.len() as u32)?;
        for cam in &self.cameras {
            w.write_u32::<LittleEndian>(cam.height as u32)?;
            w.write_u32::<LittleEndian>(cam.width as u32)?;
        }
        for cam in &self.cameras {
            io::write_f32s(w, &cam.inv_depth)?;
            io::write_f32s(w, &cam.mask)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, IoError> {
        io::read_header(r, "VIEW", VIEW_MAGIC, 1)?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            let h = r.read_u32::<LittleEndian>()? as usize;
            let w = r.read_u32::<LittleEndian>()? as usize;
            dims.push((h, w));
        }
        let mut cameras = Vec::with_capacity(count);
        for (h, w) in dims {
            let inv_depth = io::read_f32s(r, h * w)?;
            let mask = io::read_f32s(r, h * w)?;
            cameras.push(ViewRaster { height: h, width: w, inv_depth, mask });
        }
        Ok(RenderedViews { cameras })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        self.write_to(&mut BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::read_from(&mut BufReader::new(std::fs::File::open(path)?))
    }
}

// ── Procedural generation ───────────────────────────────────────────────────

/// Knobs for the seeded scene generator. Ranges are inclusive `[lo, hi]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub roi: RoiBox,
    pub ground_plane: bool,
    pub box_count: [usize; 2],
    pub box_size_m: [f64; 2],
    pub sphere_count: [usize; 2],
    pub sphere_radius_m: [f64; 2],
    /// Minimum horizontal distance between the sensor and any primitive.
    pub clearance_m: f64,
    pub sensor_height_m: f64,
    pub cameras: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub focal_px: f64,
    pub camera_pitch_deg: f64,
    pub azimuth_count: usize,
    pub elevation_angles_deg: Vec<f64>,
    pub max_range_m: f64,
}

/// Default elevation fan: a ladder of downward beams whose rings on the
/// floor step ~0.45 m apart (under two BEV cells, so the ground height is
/// pinned everywhere between rings, not just at a handful of radii), two
/// steep near-field beams for the clearance disc, and a sparse horizontal
/// fan that catches vertical faces and box tops.
fn default_elevations(sensor_height_m: f64) -> Vec<f64> {
    let mut fan = vec![-60.0, -50.0];
    let mut ring = 1.9;
    while ring <= 11.2 {
        fan.push(-(sensor_height_m / ring).atan().to_degrees());
        ring += 0.45;
    }
    fan.extend([-6.5, -4.0, -2.0, 0.0, 2.0, 4.0, 8.0]);
    fan
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            roi: RoiBox::desk(),
            ground_plane: true,
            box_count: [2, 4],
            box_size_m: [0.6, 2.2],
            sphere_count: [1, 2],
            sphere_radius_m: [0.4, 1.0],
            clearance_m: 1.5,
            sensor_height_m: 1.6,
            cameras: 4,
            image_height: 64,
            image_width: 64,
            focal_px: 27.0,
            camera_pitch_deg: -12.0,
            azimuth_count: 96,
            elevation_angles_deg: default_elevations(1.6),
            max_range_m: 30.0,
        }
    }
}

/// Deterministic scene synthesis: a ground plane plus boxes and spheres
/// scattered in a ring around the sensor, inside the ROI, with a clearance
/// disc kept empty so the sensor never sits inside matter.
pub fn generate_scene(seed: u64, cfg: &GeneratorConfig) -> Result<SceneSpec, SimError> {
    let mut rng = derive_rng(seed, "scene-gen", 0);
    let mut primitives = Vec::new();
    if cfg.ground_plane {
        primitives.push(Primitive::GroundPlane { z: 0.0 });
    }

    let half_x = cfg.roi.max[0].min(-cfg.roi.min[0]);
    let half_y = cfg.roi.max[1].min(-cfg.roi.min[1]);
    let reach = half_x.min(half_y) * 0.9;

    let n_boxes = rng.random_range(cfg.box_count[0]..=cfg.box_count[1]);
    for _ in 0..n_boxes {
        let hx = rng.random_range(cfg.box_size_m[0]..=cfg.box_size_m[1]) / 2.0;
        let hy = rng.random_range(cfg.box_size_m[0]..=cfg.box_size_m[1]) / 2.0;
        let hz = rng.random_range(cfg.box_size_m[0]..=cfg.box_size_m[1]) / 2.0;
        let margin = hx.max(hy).hypot(hx.min(hy));
        let r = rng.random_range((cfg.clearance_m + margin)..reach.max(cfg.clearance_m + margin + 0.1));
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let cx = (r * theta.cos()).clamp(cfg.roi.min[0] + hx, cfg.roi.max[0] - hx);
        let cy = (r * theta.sin()).clamp(cfg.roi.min[1] + hy, cfg.roi.max[1] - hy);
        primitives.push(Primitive::Box {
            min: [cx - hx, cy - hy, 0.0],
            max: [cx + hx, cy + hy, 2.0 * hz],
        });
    }

    let n_spheres = rng.random_range(cfg.sphere_count[0]..=cfg.sphere_count[1]);
    for _ in 0..n_spheres {
        let radius = rng.random_range(cfg.sphere_radius_m[0]..=cfg.sphere_radius_m[1]);
        let r = rng.random_range((cfg.clearance_m + radius)..reach.max(cfg.clearance_m + radius + 0.1));
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let cx = (r * theta.cos()).clamp(cfg.roi.min[0] + radius, cfg.roi.max[0] - radius);
        let cy = (r * theta.sin()).clamp(cfg.roi.min[1] + radius, cfg.roi.max[1] - radius);
        let cz = radius + rng.random_range(0.0..0.6);
        primitives.push(Primitive::Sphere { center: [cx, cy, cz], radius });
    }

    let sensor = [0.0, 0.0, cfg.sensor_height_m];
    let cameras = (0..cfg.cameras)
        .map(|i| CameraConfig {
            position: sensor,
            yaw_deg: 360.0 * i as f64 / cfg.cameras as f64,
            pitch_deg: cfg.camera_pitch_deg,
            focal_px: cfg.focal_px,
            height: cfg.image_height,
            width: cfg.image_width,
        })
        .collect();

    let scene = SceneSpec {
        version: SCENE_VERSION,
        primitives,
        lidar: LidarConfig {
            origin: sensor,
            azimuth_count: cfg.azimuth_count,
            elevation_angles_deg: cfg.elevation_angles_deg.clone(),
            max_range: cfg.max_range_m,
        },
        cameras,
    };
    scene.validate(&cfg.roi)?;
    Ok(scene)
}
