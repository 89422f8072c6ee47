//! Turns an occupancy field into downstream artifacts: ray-integrated
//! depths, rendered point clouds, and binary voxel grids.
//!
//! A "field" here is anything that maps batches of 3D points to occupancy
//! values in [0, 1] — the trained network handle, the analytic scene
//! indicator, or a test closure. All renderers are pure functions of the
//! field and their seeds.

use crate::geometry::{GeometryError, PointCloud, Ray, RoiBox, Vec3, VoxelGrid};
use crate::model::OccupancyFieldHandle;
use crate::rng::derive_rng;
use crate::simulator::{occupied, SceneSpec};
use rand::Rng;
use serde::{Deserialize, Serialize};

// ── Errors ──────────────────────────────────────────────────────────

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("bad render config: {0}")]
    BadConfig(String),
    #[error("occupancy source failed: {0}")]
    Field(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

// ── Occupancy sources ───────────────────────────────────────────────

/// Batch evaluation of an occupancy field at metric points.
pub trait OccupancySource {
    fn occupancy(&self, points: &[Vec3]) -> Result<Vec<f64>, RenderError>;
}

impl OccupancySource for OccupancyFieldHandle {
    fn occupancy(&self, points: &[Vec3]) -> Result<Vec<f64>, RenderError> {
        self.query(points).map_err(|e| RenderError::Field(e.to_string()))
    }
}

/// The analytic scene indicator: occupied → 1, free → 0. Plugging this in
/// place of a trained field must reproduce ray casting — the renderer's
/// correctness oracle.
pub struct IndicatorField<'a>(pub &'a SceneSpec);

impl OccupancySource for IndicatorField<'_> {
    fn occupancy(&self, points: &[Vec3]) -> Result<Vec<f64>, RenderError> {
        Ok(points.iter().map(|p| f64::from(occupied(self.0, *p))).collect())
    }
}

impl<F: Fn(Vec3) -> f64> OccupancySource for F {
    fn occupancy(&self, points: &[Vec3]) -> Result<Vec<f64>, RenderError> {
        Ok(points.iter().map(|&p| self(p)).collect())
    }
}

// ── Configuration ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RayRenderConfig {
    /// Sample spacing Δt along the ray, meters.
    pub step_m: f64,
    pub max_range_m: f64,
}

impl Default for RayRenderConfig {
    fn default() -> Self {
        RayRenderConfig { step_m: 0.05, max_range_m: 30.0 }
    }
}

impl RayRenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.step_m > 0.0 && self.step_m.is_finite()) {
            return Err(RenderError::BadConfig(format!("step {} must be positive", self.step_m)));
        }
        if !(self.max_range_m > 0.0 && self.max_range_m.is_finite()) {
            return Err(RenderError::BadConfig(format!(
                "max range {} must be positive",
                self.max_range_m
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelRenderConfig {
    /// M: uniform samples per voxel, aggregated by max.
    pub samples_per_voxel: usize,
    /// A voxel is occupied iff its max sampled occupancy reaches this.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for VoxelRenderConfig {
    fn default() -> Self {
        VoxelRenderConfig { samples_per_voxel: 8, threshold: 0.5, seed: 0 }
    }
}

impl VoxelRenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.samples_per_voxel == 0 {
            return Err(RenderError::BadConfig("samples per voxel must be ≥ 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(RenderError::BadConfig(format!(
                "threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Rays whose accumulated rendering weight falls below this floor emit no
/// point: an empty or untrained field would otherwise spray points at the
/// region boundary.
pub const POINT_WEIGHT_FLOOR: f64 = 0.5;

// ── Ray rendering ───────────────────────────────────────────────────

/// Everything one ray integration produced; `depth` is the
/// transmittance-weighted expected hit distance and `total_weight` how much
/// of the ray's probability mass hit anything.
#[derive(Clone, Debug)]
pub struct RayProfile {
    /// Sample distances from the ray origin.
    pub ts: Vec<f64>,
    pub occupancy: Vec<f64>,
    /// Transmittance *before* each sample: T_i = Π_{j<i}(1 − o_j).
    pub transmittance: Vec<f64>,
    /// Per-sample weights o_i·T_i.
    pub weights: Vec<f64>,
    pub depth: f64,
    pub total_weight: f64,
}

/// Integrate occupancy along a ray clipped to the region:
/// depth = Σ t_i·o_i·T_i over samples spaced Δt on
/// [t_enter, min(t_exit, max range)]. `None` when the ray misses the region
/// entirely.
pub fn render_ray_profile(
    ray: &Ray,
    source: &impl OccupancySource,
    cfg: &RayRenderConfig,
    roi: &RoiBox,
) -> Result<Option<RayProfile>, RenderError> {
    cfg.validate()?;
    let Some((t_enter, t_exit)) = ray.clip_to_roi(roi) else {
        return Ok(None);
    };
    let t_end = t_exit.min(cfg.max_range_m);
    if t_end < t_enter {
        return Ok(None);
    }
    let n = ((t_end - t_enter) / cfg.step_m).floor() as usize + 1;
    let ts: Vec<f64> = (0..n).map(|i| t_enter + i as f64 * cfg.step_m).collect();
    let points: Vec<Vec3> = ts
        .iter()
        .map(|&t| {
            // clamp away float dust so boundary samples stay inside the region
            let p = ray.point_at(t);
            [
                p[0].clamp(roi.min[0], roi.max[0]),
                p[1].clamp(roi.min[1], roi.max[1]),
                p[2].clamp(roi.min[2], roi.max[2]),
            ]
        })
        .collect();
    let occupancy = source.occupancy(&points)?;
    for (i, &o) in occupancy.iter().enumerate() {
        if !(0.0..=1.0).contains(&o) {
            return Err(RenderError::Field(format!("occupancy {o} at sample {i} outside [0, 1]")));
        }
    }
    let mut transmittance = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let (mut t_acc, mut depth, mut total_weight) = (1.0f64, 0.0, 0.0);
    for (&t, &o) in ts.iter().zip(&occupancy) {
        transmittance.push(t_acc);
        let w = o * t_acc;
        weights.push(w);
        depth += t * w;
        total_weight += w;
        t_acc *= 1.0 - o;
    }
    Ok(Some(RayProfile { ts, occupancy, transmittance, weights, depth, total_weight }))
}

/// Depth + total weight only; `None` when the ray misses the region.
pub fn render_ray_depth(
    ray: &Ray,
    source: &impl OccupancySource,
    cfg: &RayRenderConfig,
    roi: &RoiBox,
) -> Result<Option<(f64, f64)>, RenderError> {
    Ok(render_ray_profile(ray, source, cfg, roi)?.map(|p| (p.depth, p.total_weight)))
}

/// Tally of what [`render_point_cloud`] did with its rays.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PointCloudReport {
    pub emitted: usize,
    /// Rays that intersected the region but accumulated weight below the floor.
    pub dropped_low_weight: usize,
    pub missed_roi: usize,
}

/// Render one point per sufficiently-opaque ray at its integrated depth.
/// All rays are expected to share one origin (a sensor sweep).
pub fn render_point_cloud(
    rays: &[Ray],
    source: &impl OccupancySource,
    cfg: &RayRenderConfig,
    roi: &RoiBox,
) -> Result<(PointCloud, PointCloudReport), RenderError> {
    let origin = rays.first().map_or([0.0; 3], |r| r.origin);
    debug_assert!(
        rays.iter().all(|r| r.origin == origin),
        "point-cloud rays must share a sensor origin"
    );
    let mut cloud = PointCloud { points: Vec::new(), sensor_origin: origin };
    let mut report = PointCloudReport::default();
    for ray in rays {
        match render_ray_profile(ray, source, cfg, roi)? {
            None => report.missed_roi += 1,
            Some(p) if p.total_weight >= POINT_WEIGHT_FLOOR => {
                cloud.points.push(ray.point_at(p.depth));
                report.emitted += 1;
            }
            Some(_) => report.dropped_low_weight += 1,
        }
    }
    Ok((cloud, report))
}

// ── Voxel rendering ─────────────────────────────────────────────────

/// Binarize the field onto a voxel grid: per voxel, take the max occupancy
/// over M uniform samples (seeded per voxel, so the grid is reproducible and
/// order-independent) and compare against the threshold.
pub fn render_voxel_grid(
    source: &impl OccupancySource,
    roi: &RoiBox,
    voxel_size: Vec3,
    cfg: &VoxelRenderConfig,
) -> Result<VoxelGrid, RenderError> {
    cfg.validate()?;
    let mut grid = VoxelGrid::empty(*roi, voxel_size).map_err(RenderError::Geometry)?;
    let [nx, ny, nz] = grid.dims;
    let m = cfg.samples_per_voxel;
    let num = grid.num_voxels();

    // sample points for a block of voxels at a time to keep batches large
    const VOXELS_PER_BATCH: usize = 4096;
    let mut occ = vec![false; num];
    let mut batch_points: Vec<Vec3> = Vec::with_capacity(VOXELS_PER_BATCH * m);
    let mut batch_voxels: Vec<usize> = Vec::with_capacity(VOXELS_PER_BATCH);
    let flush = |points: &mut Vec<Vec3>,
                     voxels: &mut Vec<usize>,
                     occ: &mut Vec<bool>|
     -> Result<(), RenderError> {
        if voxels.is_empty() {
            return Ok(());
        }
        let values = source.occupancy(points)?;
        for (bi, &v) in voxels.iter().enumerate() {
            let best = values[bi * m..(bi + 1) * m].iter().cloned().fold(0.0f64, f64::max);
            occ[v] = best >= cfg.threshold;
        }
        points.clear();
        voxels.clear();
        Ok(())
    };

    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let v = grid.linear_index(ix, iy, iz);
                let lo = grid.voxel_min([ix, iy, iz]);
                let mut rng = derive_rng(cfg.seed, "voxel-samples", v as u64);
                for _ in 0..m {
                    batch_points.push([
                        lo[0] + rng.random::<f64>() * voxel_size[0],
                        lo[1] + rng.random::<f64>() * voxel_size[1],
                        lo[2] + rng.random::<f64>() * voxel_size[2],
                    ]);
                }
                batch_voxels.push(v);
                if batch_voxels.len() == VOXELS_PER_BATCH {
                    flush(&mut batch_points, &mut batch_voxels, &mut occ)?;
                }
            }
        }
    }
    flush(&mut batch_points, &mut batch_voxels, &mut occ)?;
    grid.occupancy = occ;
    Ok(grid)
}

// ── Tests ───────────────────────────────────────────────────────────
