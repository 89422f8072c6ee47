//! Shared spatial vocabulary: ROI box, rays, point clouds and voxel grids.
//!
//! All model-facing coordinates are in the ego frame (x forward, y left,
//! z up), in meters. Types are immutable after construction.

use crate::io::{self, IoError};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub type Vec3 = [f64; 3];

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("ROI min {min:?} must be strictly below max {max:?} componentwise")]
    BadRoi { min: Vec3, max: Vec3 },
    #[error("degenerate ray: point {index} coincides with the sensor origin")]
    DegenerateRay { index: usize },
    #[error("point {point:?} lies outside the ROI")]
    OutOfRoi { point: Vec3 },
    #[error("ray direction {dir:?} is not unit length")]
    NotUnit { dir: Vec3 },
    #[error("voxel size {size:?} must be positive")]
    BadVoxelSize { size: Vec3 },
    #[error("voxel occupancy length {got} does not match dims {dims:?}")]
    BadOccupancy { got: usize, dims: [usize; 3] },
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn addv(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scalev(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Axis-aligned scene region of interest. Boundaries are inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl RoiBox {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self, GeometryError> {
        if (0..3).any(|i| min[i] >= max[i]) {
            return Err(GeometryError::BadRoi { min, max });
        }
        Ok(RoiBox { min, max })
    }

    /// The full-scale region used by the reference evaluation protocol:
    /// [-40, 40] x [-40, 40] x [-1, 5.4] m.
    pub fn full_scale() -> Self {
        RoiBox {
            min: [-40.0, -40.0, -1.0],
            max: [40.0, 40.0, 5.4],
        }
    }

    /// Compact region for desk-scale experiments.
    pub fn desk() -> Self {
        RoiBox {
            min: [-8.0, -8.0, -1.0],
            max: [8.0, 8.0, 3.0],
        }
    }

    pub fn extent(&self) -> Vec3 {
        sub(self.max, self.min)
    }

    pub fn center(&self) -> Vec3 {
        scalev(addv(self.min, self.max), 0.5)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Affine map sending min -> (-1,-1,-1) and max -> (1,1,1).
    pub fn normalize_point(&self, p: Vec3) -> Result<Vec3, GeometryError> {
        if !self.contains(p) {
            return Err(GeometryError::OutOfRoi { point: p });
        }
        let e = self.extent();
        Ok([
            2.0 * (p[0] - self.min[0]) / e[0] - 1.0,
            2.0 * (p[1] - self.min[1]) / e[1] - 1.0,
            2.0 * (p[2] - self.min[2]) / e[2] - 1.0,
        ])
    }

    /// Inverse of [`RoiBox::normalize_point`].
    pub fn denormalize_point(&self, n: Vec3) -> Vec3 {
        let e = self.extent();
        [
            self.min[0] + (n[0] + 1.0) / 2.0 * e[0],
            self.min[1] + (n[1] + 1.0) / 2.0 * e[1],
            self.min[2] + (n[2] + 1.0) / 2.0 * e[2],
        ]
    }
}

/// A LiDAR-style ray. `hit_distance` is absent for non-returning rays, which
/// are representable but excluded from supervision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub hit_distance: Option<f64>,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, hit_distance: Option<f64>) -> Result<Self, GeometryError> {
        if (norm(direction) - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotUnit { dir: direction });
        }
        debug_assert!(hit_distance.is_none_or(|d| d > 0.0));
        Ok(Ray { origin, direction, hit_distance })
    }

    /// Ray toward `target`, hit distance set to the separation.
    pub fn toward(origin: Vec3, target: Vec3) -> Result<Self, GeometryError> {
        let delta = sub(target, origin);
        let d = norm(delta);
        if d == 0.0 {
            return Err(GeometryError::DegenerateRay { index: 0 });
        }
        Ok(Ray {
            origin,
            direction: scalev(delta, 1.0 / d),
            hit_distance: Some(d),
        })
    }

    pub fn point_at(&self, t: f64) -> Vec3 {
        addv(self.origin, scalev(self.direction, t))
    }

    /// Slab intersection with the ROI; `None` when the ray misses the box.
    /// The interval is clamped to t >= 0.
    pub fn clip_to_roi(&self, roi: &RoiBox) -> Option<(f64, f64)> {
        let mut t_enter = 0.0f64;
        let mut t_exit = f64::INFINITY;
        for i in 0..3 {
            let o = self.origin[i];
            let d = self.direction[i];
            if d.abs() < 1e-15 {
                if o < roi.min[i] || o > roi.max[i] {
                    return None;
                }
                continue;
            }
            let (mut t0, mut t1) = ((roi.min[i] - o) / d, (roi.max[i] - o) / d);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_enter = t_enter.max(t0);
            t_exit = t_exit.min(t1);
        }
        (t_enter <= t_exit).then_some((t_enter, t_exit))
    }
}

/// Sensor returns in the ego frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub sensor_origin: Vec3,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, sensor_origin: Vec3) -> Self {
        debug_assert!(points.iter().flatten().all(|v| v.is_finite()));
        PointCloud { points, sensor_origin }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// One supervision ray per point: origin at the sensor, unit direction,
    /// hit distance equal to the separation. A point coinciding with the
    /// origin is a degenerate ray and reported by index.
    pub fn to_rays(&self) -> Result<Vec<Ray>, GeometryError> {
        self.points
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                Ray::toward(self.sensor_origin, p)
                    .map_err(|_| GeometryError::DegenerateRay { index: i })
            })
            .collect()
    }
}

/// Binary occupancy over a regular grid spanning the ROI, with an optional
/// per-voxel visibility mask. Linear index order is x-major: ((ix*ny)+iy)*nz+iz.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub roi: RoiBox,
    pub voxel_size: Vec3,
    pub dims: [usize; 3],
    pub occupancy: Vec<bool>,
    pub visibility: Option<Vec<bool>>,
}

impl VoxelGrid {
    /// Grid dims follow round(extent / voxel_size) componentwise.
    pub fn dims_for(roi: &RoiBox, voxel_size: Vec3) -> Result<[usize; 3], GeometryError> {
        if voxel_size.iter().any(|&v| v <= 0.0) {
            return Err(GeometryError::BadVoxelSize { size: voxel_size });
        }
        let e = roi.extent();
        Ok([
            (e[0] / voxel_size[0]).round() as usize,
            (e[1] / voxel_size[1]).round() as usize,
            (e[2] / voxel_size[2]).round() as usize,
        ])
    }

    pub fn empty(roi: RoiBox, voxel_size: Vec3) -> Result<Self, GeometryError> {
        let dims = Self::dims_for(&roi, voxel_size)?;
        Ok(VoxelGrid {
            roi,
            voxel_size,
            dims,
            occupancy: vec![false; dims[0] * dims[1] * dims[2]],
            visibility: None,
        })
    }

    pub fn new(
        roi: RoiBox,
        voxel_size: Vec3,
        occupancy: Vec<bool>,
        visibility: Option<Vec<bool>>,
    ) -> Result<Self, GeometryError> {
        let dims = Self::dims_for(&roi, voxel_size)?;
        let n = dims[0] * dims[1] * dims[2];
        if occupancy.len() != n || visibility.as_ref().is_some_and(|v| v.len() != n) {
            return Err(GeometryError::BadOccupancy { got: occupancy.len(), dims });
        }
        Ok(VoxelGrid { roi, voxel_size, dims, occupancy, visibility })
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn linear_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    /// Voxel index containing `p`, clamped into range on the ROI boundary.
    pub fn voxel_of(&self, p: Vec3) -> Option<[usize; 3]> {
        if !self.roi.contains(p) {
            return None;
        }
        let mut idx = [0usize; 3];
        for i in 0..3 {
            let f = (p[i] - self.roi.min[i]) / self.voxel_size[i];
            idx[i] = (f.floor() as usize).min(self.dims[i] - 1);
        }
        Some(idx)
    }

    /// World-space lower corner of a voxel.
    pub fn voxel_min(&self, idx: [usize; 3]) -> Vec3 {
        [
            self.roi.min[0] + idx[0] as f64 * self.voxel_size[0],
            self.roi.min[1] + idx[1] as f64 * self.voxel_size[1],
            self.roi.min[2] + idx[2] as f64 * self.voxel_size[2],
        ]
    }
}

// ── On-disk formats ─────────────────────────────────────────────────────────

const LPCD_MAGIC: &[u8; 4] = b"LPCD";
const VOXG_MAGIC: &[u8; 4] = b"VOXG";
const FORMAT_VERSION: u32 = 1;

impl PointCloud {
    /// LPCD: header | sensor_origin 3xf32 | count u64 | count x 3xf32 points.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), IoError> {
        io::write_header(w, LPCD_MAGIC, FORMAT_VERSION)?;
        io::write_f32s(w, &self.sensor_origin)?;
        w.write_u64::<LittleEndian>(self.points.len() as u64)?;
        for p in &self.points {
            io::write_f32s(w, p)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, IoError> {
        io::read_header(r, "LPCD", LPCD_MAGIC, FORMAT_VERSION)?;
        let origin = io::read_f32s(r, 3)?;
        let count = r.read_u64::<LittleEndian>()? as usize;
        let mut points = Vec::with_capacity(count);
        for _ in 0..count {
            let p = io::read_f32s(r, 3)?;
            points.push([p[0], p[1], p[2]]);
        }
        Ok(PointCloud::new(points, [origin[0], origin[1], origin[2]]))
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        self.write_to(&mut BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

impl VoxelGrid {
    /// VOXG: header | roi 6xf32 | voxel_size 3xf32 | dims 3xu32 |
    /// bit-packed occupancy | visibility flag byte | optional bit-packed
    /// visibility.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), IoError> {
        io::write_header(w, VOXG_MAGIC, FORMAT_VERSION)?;
        io::write_f32s(w, &self.roi.min)?;
        io::write_f32s(w, &self.roi.max)?;
        io::write_f32s(w, &self.voxel_size)?;
        for d in self.dims {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        io::write_bits(w, &self.occupancy)?;
        match &self.visibility {
            None => w.write_u8(0)?,
            Some(vis) => {
                w.write_u8(1)?;
                io::write_bits(w, vis)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, IoError> {
        io::read_header(r, "VOXG", VOXG_MAGIC, FORMAT_VERSION)?;
        let lo = io::read_f32s(r, 3)?;
        let hi = io::read_f32s(r, 3)?;
        let vs = io::read_f32s(r, 3)?;
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let n = dims[0] * dims[1] * dims[2];
        let occupancy = io::read_bits(r, n)?;
        let visibility = match r.read_u8()? {
            0 => None,
            1 => Some(io::read_bits(r, n)?),
            f => {
                return Err(IoError::Malformed {
                    format: "VOXG",
                    reason: format!("visibility flag byte must be 0 or 1, found {f}"),
                })
            }
        };
        let roi = RoiBox::new([lo[0], lo[1], lo[2]], [hi[0], hi[1], hi[2]]).map_err(|e| {
            IoError::Malformed { format: "VOXG", reason: e.to_string() }
        })?;
        // Dims are stored explicitly; trust them over recomputation so that
        // f32 rounding of the ROI cannot shift the grid shape.
        Ok(VoxelGrid { roi, voxel_size: [vs[0], vs[1], vs[2]], dims, occupancy, visibility })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        self.write_to(&mut BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
