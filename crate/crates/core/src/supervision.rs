//! Turns LiDAR rays into balanced, labeled occupancy query sets.
//!
//! Along a returning ray with hit distance d, everything in [0, d) is free
//! space and the interval [d, d+τ) is occupied. Negatives are drawn from the
//! free segment by one of three strategies (uniform, stratified over K bins,
//! stratified plus a symmetric share from [d−τ, d)); positives are drawn
//! uniformly from [d, d+τ).

use crate::geometry::{PointCloud, Ray, RoiBox, Vec3};
use crate::io::{self, IoError};
use crate::rng::derive_rng;
use crate::simulator::{occupied, SceneSpec};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SupervisionError {
    #[error("invalid sampling config: {0}")]
    BadConfig(String),
    #[error("no usable rays (need returning rays with in-ROI hit points)")]
    NoUsableRays,
    #[error("ray {index} has no positive hit distance")]
    MissingHitDistance { index: usize },
    #[error("could not satisfy {what}: collected {collected} of {target} before exhausting attempts")]
    Unsatisfiable { what: &'static str, collected: usize, target: usize },
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Negatives uniform on [0, d).
    Random,
    /// One negative per bin of a K-partition of [0, d).
    Stratified,
    /// Stratified negatives plus a share drawn uniformly from [d−τ, d).
    StratifiedSymmetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub strategy: SamplingStrategy,
    /// K: free-space bins per ray for the stratified strategies.
    pub free_bins: usize,
    /// τ: surface-interval thickness in meters.
    pub surface_tau_m: f64,
    pub positives: usize,
    pub negatives: usize,
    /// How many of `negatives` come from the symmetric interval
    /// (stratified_symmetric only).
    pub symmetric_share: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            strategy: SamplingStrategy::StratifiedSymmetric,
            free_bins: 5,
            surface_tau_m: 0.1,
            positives: 4096,
            negatives: 4096,
            symmetric_share: 816,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    /// The full-scale counts: 150K positives, 150K negatives of which 30K
    /// come from the symmetric interval.
    pub fn full_scale() -> Self {
        SamplingConfig {
            strategy: SamplingStrategy::StratifiedSymmetric,
            free_bins: 5,
            surface_tau_m: 0.1,
            positives: 150_000,
            negatives: 150_000,
            symmetric_share: 30_000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SupervisionError> {
        let err = |msg: String| Err(SupervisionError::BadConfig(msg));
        if self.free_bins == 0 {
            return err("free_bins must be >= 1".into());
        }
        if self.surface_tau_m <= 0.0 {
            return err(format!("surface_tau_m must be > 0, got {}", self.surface_tau_m));
        }
        if self.positives == 0 || self.negatives == 0 {
            return err("positives and negatives must be > 0".into());
        }
        if self.symmetric_share > self.negatives {
            return err(format!(
                "symmetric_share {} exceeds negatives {}",
                self.symmetric_share, self.negatives
            ));
        }
        if self.strategy != SamplingStrategy::StratifiedSymmetric && self.symmetric_share != 0 {
            return err("symmetric_share requires the stratified_symmetric strategy".into());
        }
        let stratified = self.negatives - self.symmetric_share;
        if self.strategy != SamplingStrategy::Random && stratified % self.free_bins != 0 {
            return err(format!(
                "stratified negative count {stratified} must be a multiple of free_bins {}",
                self.free_bins
            ));
        }
        Ok(())
    }
}

/// Labeled 3D occupancy queries. `true` = occupied.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledQuerySet {
    pub points: Vec<Vec3>,
    pub labels: Vec<bool>,
    pub ray_index: Vec<u32>,
}

impl LabeledQuerySet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A query set plus the bookkeeping the sampler reports.
#[derive(Clone, Debug)]
pub struct SamplingOutcome {
    pub queries: LabeledQuerySet,
    /// Rays whose d ≤ τ, excluded from symmetric-interval draws.
    pub skipped_symmetric_rays: usize,
    /// Candidate points discarded for falling outside the ROI.
    pub discarded_out_of_roi: usize,
}

struct Sampler<'a> {
    rays: &'a [Ray],
    /// Indices of usable rays, deterministically shuffled.
    order: Vec<u32>,
    roi: &'a RoiBox,
    points: Vec<Vec3>,
    labels: Vec<bool>,
    ray_index: Vec<u32>,
    discarded: usize,
}

impl Sampler<'_> {
    fn dist(&self, ray_id: u32) -> f64 {
        self.rays[ray_id as usize].hit_distance.expect("validated")
    }

    fn try_push(&mut self, ray_id: u32, t: f64, label: bool) -> bool {
        let p = self.rays[ray_id as usize].point_at(t);
        if self.roi.contains(p) {
            self.points.push(p);
            self.labels.push(label);
            self.ray_index.push(ray_id);
            true
        } else {
            self.discarded += 1;
            false
        }
    }

    /// Draw until `target` accepted points, cycling rays in shuffled order.
    /// `interval(d)` yields the half-open t-range, or `None` to skip the ray
    /// (recorded at most once per ray in `skipped`).
    fn collect_uniform(
        &mut self,
        target: usize,
        label: bool,
        what: &'static str,
        rng: &mut impl Rng,
        interval: impl Fn(f64) -> Option<(f64, f64)>,
        mut skipped: Option<&mut Vec<bool>>,
    ) -> Result<(), SupervisionError> {
        let mut accepted = 0usize;
        let budget = 200 * target + 10 * self.order.len() + 1000;
        let mut attempts = 0usize;
        let mut cursor = 0usize;
        while accepted < target {
            if attempts >= budget {
                return Err(SupervisionError::Unsatisfiable { what, collected: accepted, target });
            }
            attempts += 1;
            let ray_id = self.order[cursor % self.order.len()];
            cursor += 1;
            match interval(self.dist(ray_id)) {
                Some((lo, hi)) => {
                    let t = rng.random_range(lo..hi);
                    if self.try_push(ray_id, t, label) {
                        accepted += 1;
                    }
                }
                None => {
                    if let Some(flags) = skipped.as_deref_mut() {
                        flags[ray_id as usize] = true;
                    }
                }
            }
        }
        Ok(())
    }

    /// Stratified negatives: per visited ray, one uniform draw per bin of the
    /// K-partition of [0, d). When fewer than K draws remain, only the first
    /// bins are drawn (configs validated here keep the count divisible by K).
    fn collect_stratified(
        &mut self,
        target: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<(), SupervisionError> {
        let mut accepted = 0usize;
        let budget = 200 * target + 10 * self.order.len() + 1000;
        let mut attempts = 0usize;
        let mut cursor = 0usize;
        while accepted < target {
            if attempts >= budget {
                return Err(SupervisionError::Unsatisfiable {
                    what: "stratified negatives",
                    collected: accepted,
                    target,
                });
            }
            let ray_id = self.order[cursor % self.order.len()];
            cursor += 1;
            let d = self.dist(ray_id);
            let bins = k.min(target - accepted);
            for bin in 0..bins {
                attempts += 1;
                let lo = d * bin as f64 / k as f64;
                let hi = d * (bin + 1) as f64 / k as f64;
                let t = rng.random_range(lo..hi);
                if self.try_push(ray_id, t, false) {
                    accepted += 1;
                }
            }
        }
        Ok(())
    }
}

/// Draw a balanced labeled query set from returning rays, per the configured
/// strategy. Only rays whose hit point lies inside the ROI participate:
/// when the sensor origin is also inside, the whole free segment is in-ROI
/// by convexity, so negative draws are never discarded.
pub fn sample_queries(
    rays: &[Ray],
    cfg: &SamplingConfig,
    roi: &RoiBox,
) -> Result<SamplingOutcome, SupervisionError> {
    cfg.validate()?;
    for (i, r) in rays.iter().enumerate() {
        if r.hit_distance.is_none_or(|d| d <= 0.0) {
            return Err(SupervisionError::MissingHitDistance { index: i });
        }
    }
    let mut order: Vec<u32> = (0..rays.len() as u32)
        .filter(|&i| roi.contains(rays[i as usize].point_at(rays[i as usize].hit_distance.unwrap())))
        .collect();
    if order.is_empty() {
        return Err(SupervisionError::NoUsableRays);
    }
    order.shuffle(&mut derive_rng(cfg.seed, "query-ray-order", 0));

    let mut sampler = Sampler {
        rays,
        order,
        roi,
        points: Vec::with_capacity(cfg.positives + cfg.negatives),
        labels: Vec::with_capacity(cfg.positives + cfg.negatives),
        ray_index: Vec::with_capacity(cfg.positives + cfg.negatives),
        discarded: 0,
    };
    let tau = cfg.surface_tau_m;

    let mut pos_rng = derive_rng(cfg.seed, "query-pos", 0);
    sampler.collect_uniform(cfg.positives, true, "positives", &mut pos_rng, |d| Some((d, d + tau)), None)?;

    let mut neg_rng = derive_rng(cfg.seed, "query-neg", 0);
    let mut skipped_flags = vec![false; rays.len()];
    match cfg.strategy {
        SamplingStrategy::Random => {
            sampler.collect_uniform(cfg.negatives, false, "negatives", &mut neg_rng, |d| Some((0.0, d)), None)?;
        }
        SamplingStrategy::Stratified => {
            sampler.collect_stratified(cfg.negatives, cfg.free_bins, &mut neg_rng)?;
        }
        SamplingStrategy::StratifiedSymmetric => {
            sampler.collect_stratified(cfg.negatives - cfg.symmetric_share, cfg.free_bins, &mut neg_rng)?;
            let mut sym_rng = derive_rng(cfg.seed, "query-sym", 0);
            sampler.collect_uniform(
                cfg.symmetric_share,
                false,
                "symmetric negatives",
                &mut sym_rng,
                |d| (d > tau).then_some((d - tau, d)),
                Some(&mut skipped_flags),
            )?;
        }
    }

    Ok(SamplingOutcome {
        queries: LabeledQuerySet {
            points: sampler.points,
            labels: sampler.labels,
            ray_index: sampler.ray_index,
        },
        skipped_symmetric_rays: skipped_flags.iter().filter(|&&s| s).count(),
        discarded_out_of_roi: sampler.discarded,
    })
}

/// Convenience: simulate the scene's LiDAR and sample queries from it.
pub fn queries_from_cloud(
    cloud: &PointCloud,
    cfg: &SamplingConfig,
    roi: &RoiBox,
) -> Result<SamplingOutcome, SupervisionError> {
    let rays = cloud.to_rays().map_err(|e| SupervisionError::BadConfig(e.to_string()))?;
    sample_queries(&rays, cfg, roi)
}

/// Label agreement against the analytic oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleAgreement {
    pub negative: f64,
    pub positive: f64,
    pub overall: f64,
}

/// Fraction of labels agreeing with the simulator's occupancy oracle.
/// Negatives are free space by construction, so their agreement must be
/// exactly 1.0 for query sets produced from the same scene's LiDAR.
/// An empty set agrees vacuously (1.0).
pub fn validate_against_oracle(qs: &LabeledQuerySet, scene: &SceneSpec) -> OracleAgreement {
    let (mut pos, mut pos_ok, mut neg, mut neg_ok) = (0usize, 0usize, 0usize, 0usize);
    for (p, &label) in qs.points.iter().zip(&qs.labels) {
        let occ = occupied(scene, *p);
        if label {
            pos += 1;
            pos_ok += usize::from(occ);
        } else {
            neg += 1;
            neg_ok += usize::from(!occ);
        }
    }
    let frac = |ok: usize, n: usize| if n == 0 { 1.0 } else { ok as f64 / n as f64 };
    OracleAgreement {
        negative: frac(neg_ok, neg),
        positive: frac(pos_ok, pos),
        overall: frac(pos_ok + neg_ok, pos + neg),
    }
}

// ── LQRY binary format ──────────────────────────────────────────────────────

const LQRY_MAGIC: &[u8; 4] = b"LQRY";

impl LabeledQuerySet {
    /// LQRY: header | count u64 | count × (3×f32 point, u8 label, u32 ray).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), IoError> {
        io::write_header(w, LQRY_MAGIC, 1)?;
        w.write_u64::<LittleEndian>(self.points.len() as u64)?;
        for i in 0..self.points.len() {
            io::write_f32s(w, &self.points[i])?;
            w.write_u8(u8::from(self.labels[i]))?;
            w.write_u32::<LittleEndian>(self.ray_index[i])?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, IoError> {
        io::read_header(r, "LQRY", LQRY_MAGIC, 1)?;
        let count = r.read_u64::<LittleEndian>()? as usize;
        let mut points = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        let mut ray_index = Vec::with_capacity(count);
        for i in 0..count {
            let p = io::read_f32s(r, 3)?;
            points.push([p[0], p[1], p[2]]);
            match r.read_u8()? {
                0 => labels.push(false),
                1 => labels.push(true),
                other => {
                    return Err(IoError::Malformed {
                        format: "LQRY",
                        reason: format!("label byte {other} at record {i} (must be 0 or 1)"),
                    })
                }
            }
            ray_index.push(r.read_u32::<LittleEndian>()?);
        }
        Ok(LabeledQuerySet { points, labels, ray_index })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        self.write_to(&mut BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::read_from(&mut BufReader::new(std::fs::File::open(path)?))
    }
}
