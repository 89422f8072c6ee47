//! The measurement suite: relative depth error along sensor rays, Chamfer
//! distance between point clouds, confusion scores on binary voxel grids
//! restricted to camera-visible space, and rank aggregation across
//! method × dataset result tables.
//!
//! Every metric is a pure function of its inputs. Nearest neighbors go
//! through an exact k-d tree; camera visibility walks each pixel ray
//! through the grid analytically, so both are deterministic and testable
//! against brute-force oracles.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{dot, sub, PointCloud, Ray, RoiBox, Vec3, VoxelGrid};
use crate::rendering::{
    render_ray_profile, OccupancySource, RayRenderConfig, RenderError, POINT_WEIGHT_FLOOR,
};
use crate::simulator::{cast, pixel_ray, SceneSpec};

// ── Errors ──────────────────────────────────────────────────────────

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("bad evaluation input: {0}")]
    BadInput(String),
    /// Raised when a metric would average over nothing.
    #[error("metric has empty support: {0}")]
    EmptySupport(String),
    #[error("rank table is incomplete: no score for {method} in column {column}")]
    MissingCell { method: String, column: String },
    #[error("malformed rank table: {0}")]
    BadTable(String),
    #[error("malformed metric report: {0}")]
    BadReport(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("evaluation I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("report encoding: {0}")]
    Json(#[from] serde_json::Error),
}

// ── Metric report ───────────────────────────────────────────────────

/// A named bundle of metric values with the support (item count) each one
/// averaged over, diagnostic tallies, and an echo of the driving config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    /// Metric name → value.
    pub metrics: BTreeMap<String, f64>,
    /// Metric name → number of items it averaged over; always > 0.
    pub support: BTreeMap<String, u64>,
    /// Diagnostic counts (exclusions, drops); zero entries are fine here.
    pub notes: BTreeMap<String, u64>,
    /// The configuration that produced the report, as free-form JSON.
    pub config: serde_json::Value,
}

impl MetricReport {
    /// Every metric must be finite and carry a positive support count.
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.metrics.is_empty() {
            return Err(EvalError::BadReport("no metrics".into()));
        }
        for (name, &v) in &self.metrics {
            if !v.is_finite() {
                return Err(EvalError::BadReport(format!("metric {name} is {v}")));
            }
            match self.support.get(name) {
                Some(&n) if n > 0 => {}
                Some(_) => {
                    return Err(EvalError::BadReport(format!("metric {name} has zero support")))
                }
                None => {
                    return Err(EvalError::BadReport(format!("metric {name} has no support entry")))
                }
            }
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String, EvalError> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self, EvalError> {
        let report: MetricReport = serde_json::from_str(text)?;
        report.validate()?;
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

// ── Absolute relative depth error ───────────────────────────────────

/// Mean |pred − gt| / gt over rays with positive ground truth, plus the
/// exclusion tally.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AbsRel {
    pub value: f64,
    /// Rays that entered the mean.
    pub evaluated: usize,
    /// Rays excluded for non-positive ground-truth depth.
    pub excluded: usize,
}

pub fn absrel(pred: &[f64], gt: &[f64]) -> Result<AbsRel, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::BadInput(format!(
            "{} predicted depths against {} ground-truth depths",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(EvalError::BadInput("no rays".into()));
    }
    if pred.iter().chain(gt).any(|v| !v.is_finite()) {
        return Err(EvalError::BadInput("non-finite depth".into()));
    }
    let (mut sum, mut evaluated, mut excluded) = (0.0, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        if g <= 0.0 {
            excluded += 1;
            continue;
        }
        sum += (p - g).abs() / g;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(EvalError::EmptySupport(format!(
            "all {excluded} rays had non-positive ground truth"
        )));
    }
    Ok(AbsRel { value: sum / evaluated as f64, evaluated, excluded })
}

// ── Chamfer distance ────────────────────────────────────────────────

fn dist_sq(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

#[derive(Clone, Copy, Debug)]
struct KdNode {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// Exact nearest-neighbor search over 3D points: a median-split k-d tree.
/// Pruning only ever skips subtrees whose best case ties the incumbent, so
/// reported distances are bit-identical to a brute-force scan.
pub struct KdTree3 {
    points: Vec<Vec3>,
    nodes: Vec<KdNode>,
    root: usize,
}

impl KdTree3 {
    pub fn build(points: &[Vec3]) -> Result<Self, EvalError> {
        if points.is_empty() {
            return Err(EvalError::BadInput("k-d tree over an empty cloud".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EvalError::BadInput("non-finite point coordinate".into()));
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root =
            Self::build_rec(points, &mut order, 0, &mut nodes).expect("non-empty point set");
        Ok(KdTree3 { points: points.to_vec(), nodes, root })
    }

    fn build_rec(
        points: &[Vec3],
        order: &mut [usize],
        depth: usize,
        nodes: &mut Vec<KdNode>,
    ) -> Option<usize> {
        if order.is_empty() {
            return None;
        }
        let axis = depth % 3;
        // index tiebreak keeps the build deterministic under duplicates
        order.sort_unstable_by(|&i, &j| {
            points[i][axis].partial_cmp(&points[j][axis]).expect("finite").then(i.cmp(&j))
        });
        let mid = order.len() / 2;
        let id = nodes.len();
        nodes.push(KdNode { point: order[mid], axis, left: None, right: None });
        let (lo, rest) = order.split_at_mut(mid);
        let left = Self::build_rec(points, lo, depth + 1, nodes);
        let right = Self::build_rec(points, &mut rest[1..], depth + 1, nodes);
        nodes[id].left = left;
        nodes[id].right = right;
        Some(id)
    }

    /// Index of a nearest point and the Euclidean distance to it.
    pub fn nearest(&self, p: Vec3) -> (usize, f64) {
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_rec(Some(self.root), p, &mut best);
        (best.1, best.0.sqrt())
    }

    fn nearest_rec(&self, node: Option<usize>, p: Vec3, best: &mut (f64, usize)) {
        let Some(id) = node else { return };
        let n = self.nodes[id];
        let q = self.points[n.point];
        let d2 = dist_sq(p, q);
        if d2 < best.0 {
            *best = (d2, n.point);
        }
        let delta = p[n.axis] - q[n.axis];
        let (near, far) = if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.nearest_rec(near, p, best);
        // every far-side point is at least |delta| away along this axis
        if delta * delta <= best.0 {
            self.nearest_rec(far, p, best);
        }
    }
}

/// Symmetric Chamfer distance in meters:
/// ½·(mean nearest-neighbor distance a→b + mean b→a), unsquared Euclidean.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::BadInput("chamfer over an empty cloud".into()));
    }
    let (tree_a, tree_b) = (KdTree3::build(&a.points)?, KdTree3::build(&b.points)?);
    let mean_to = |from: &[Vec3], tree: &KdTree3| {
        let dists: Vec<f64> = from.par_iter().map(|&p| tree.nearest(p).1).collect();
        dists.iter().sum::<f64>() / dists.len() as f64
    };
    Ok(0.5 * (mean_to(&a.points, &tree_b) + mean_to(&b.points, &tree_a)))
}

// ── Occupancy confusion scores ──────────────────────────────────────

/// IoU/F1 over the camera-visible voxels, with the confusion counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OccupancyScores {
    pub iou: f64,
    pub f1: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    /// Voxels that entered the comparison.
    pub visible: usize,
}

/// Compare binary occupancy grids inside the ground truth's visibility
/// mask: IoU = TP/(TP+FP+FN), F1 = 2TP/(2TP+FP+FN). A comparison with no
/// positives anywhere (all visible voxels agree on "free") scores 1.
pub fn occupancy_scores(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<OccupancyScores, EvalError> {
    if pred.dims != gt.dims {
        return Err(EvalError::BadInput(format!(
            "grid dims {:?} vs {:?}",
            pred.dims, gt.dims
        )));
    }
    if pred.roi != gt.roi {
        return Err(EvalError::BadInput("grids cover different regions".into()));
    }
    let Some(vis) = &gt.visibility else {
        return Err(EvalError::BadInput(
            "ground-truth grid carries no visibility mask".into(),
        ));
    };
    let (mut tp, mut fp, mut fneg, mut visible) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..gt.num_voxels() {
        if !vis[i] {
            continue;
        }
        visible += 1;
        match (pred.occupancy[i], gt.occupancy[i]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if visible == 0 {
        return Err(EvalError::EmptySupport("no voxel is camera-visible".into()));
    }
    let denom = tp + fp + fneg;
    let (iou, f1) = if denom == 0 {
        (1.0, 1.0)
    } else {
        (tp as f64 / denom as f64, 2.0 * tp as f64 / (tp + denom) as f64)
    };
    Ok(OccupancyScores { iou, f1, true_pos: tp, false_pos: fp, false_neg: fneg, visible })
}

// ── Camera visibility ───────────────────────────────────────────────

/// March a ray across the grid, invoking `mark` with the linear index of
/// every voxel whose entry point lies at parameter t ≤ `t_stop` (the ray's
/// first scene hit; unbounded when `None`). Boundary-crossing parameters
/// are recomputed from voxel indices rather than accumulated, so exact
/// surface-on-boundary cases stay bit-stable.
fn walk_grid(grid: &VoxelGrid, ray: &Ray, t_stop: Option<f64>, mut mark: impl FnMut(usize)) {
    let Some((t0, t1)) = ray.clip_to_roi(&grid.roi) else { return };
    let t_cap = t_stop.map_or(t1, |h| h.min(t1));
    if t_cap < t0 {
        return; // occluded before the region begins
    }
    let entry = ray.point_at(t0);
    let entry = [
        entry[0].clamp(grid.roi.min[0], grid.roi.max[0]),
        entry[1].clamp(grid.roi.min[1], grid.roi.max[1]),
        entry[2].clamp(grid.roi.min[2], grid.roi.max[2]),
    ];
    let Some(mut idx) = grid.voxel_of(entry) else { return };
    let mut t_entry = t0;
    loop {
        if t_entry > t_cap {
            return;
        }
        mark(grid.linear_index(idx[0], idx[1], idx[2]));
        // nearest voxel boundary ahead across the three axes
        let (mut t_next, mut k) = (f64::INFINITY, usize::MAX);
        for i in 0..3 {
            let d = ray.direction[i];
            if d.abs() < 1e-15 {
                continue;
            }
            let steps = if d > 0.0 { idx[i] + 1 } else { idx[i] };
            let boundary = grid.roi.min[i] + steps as f64 * grid.voxel_size[i];
            let t = (boundary - ray.origin[i]) / d;
            if t < t_next {
                (t_next, k) = (t, i);
            }
        }
        if k == usize::MAX || t_next > t1 {
            return; // axis-degenerate ray, or leaving the region
        }
        if ray.direction[k] > 0.0 {
            idx[k] += 1;
            if idx[k] >= grid.dims[k] {
                return;
            }
        } else {
            if idx[k] == 0 {
                return;
            }
            idx[k] -= 1;
        }
        t_entry = t_next;
    }
}

/// Per-voxel camera visibility for `grid`'s geometry: a voxel is visible
/// iff some camera's pixel ray traverses it at or before that ray's first
/// scene hit. The mask is aligned with `grid`'s linear indexing; attach it
/// via `grid.visibility`.
pub fn visibility_mask(scene: &SceneSpec, grid: &VoxelGrid) -> Result<Vec<bool>, EvalError> {
    if scene.cameras.is_empty() {
        return Err(EvalError::BadInput("scene has no camera rig".into()));
    }
    let per_camera: Vec<Vec<bool>> = scene
        .cameras
        .par_iter()
        .map(|cam| {
            let mut mask = vec![false; grid.num_voxels()];
            for v in 0..cam.height {
                for u in 0..cam.width {
                    let ray = pixel_ray(cam, u, v);
                    walk_grid(grid, &ray, cast(scene, &ray), |i| mask[i] = true);
                }
            }
            mask
        })
        .collect();
    let mut mask = vec![false; grid.num_voxels()];
    for m in per_camera {
        for (dst, src) in mask.iter_mut().zip(m) {
            *dst |= src;
        }
    }
    Ok(mask)
}

// ── Rank tables ─────────────────────────────────────────────────────

/// Whether smaller or larger scores are better in a column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Lower,
    Higher,
}

impl Orientation {
    fn beats(self, a: f64, b: f64) -> bool {
        match self {
            Orientation::Lower => a < b,
            Orientation::Higher => a > b,
        }
    }
}

/// Methods × (dataset, metric) score matrix. `None` marks a missing cell;
/// ranking refuses incomplete tables.
#[derive(Clone, Debug, PartialEq)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub columns: Vec<String>,
    pub orientation: Vec<Orientation>,
    /// Row-major methods × columns.
    pub scores: Vec<Vec<Option<f64>>>,
}

impl RankTable {
    pub fn new(
        methods: Vec<String>,
        columns: Vec<String>,
        orientation: Vec<Orientation>,
        scores: Vec<Vec<Option<f64>>>,
    ) -> Result<Self, EvalError> {
        if methods.is_empty() || columns.is_empty() {
            return Err(EvalError::BadTable("no methods or no columns".into()));
        }
        if orientation.len() != columns.len() {
            return Err(EvalError::BadTable(format!(
                "{} orientations for {} columns",
                orientation.len(),
                columns.len()
            )));
        }
        if scores.len() != methods.len() || scores.iter().any(|r| r.len() != columns.len()) {
            return Err(EvalError::BadTable("score matrix shape mismatch".into()));
        }
        for (m, row) in methods.iter().zip(&scores) {
            for (c, cell) in row.iter().enumerate() {
                if cell.is_some_and(|v| !v.is_finite()) {
                    return Err(EvalError::BadTable(format!(
                        "non-finite score for {m} in column {}",
                        columns[c]
                    )));
                }
            }
        }
        for (i, m) in methods.iter().enumerate() {
            if methods[..i].contains(m) {
                return Err(EvalError::BadTable(format!("duplicate method {m}")));
            }
        }
        Ok(RankTable { methods, columns, orientation, scores })
    }

    /// Parse the CSV interchange form: a header row naming the columns, an
    /// `orientation` row of `lower`/`higher`, then one row per method.
    /// Cells contain no quoting; an empty cell is a missing score.
    pub fn from_csv_str(text: &str) -> Result<Self, EvalError> {
        let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| EvalError::BadTable("empty table".into()))?
            .split(',')
            .collect();
        if header.len() < 2 {
            return Err(EvalError::BadTable("header names no columns".into()));
        }
        let columns: Vec<String> = header[1..].iter().map(|c| c.trim().to_string()).collect();
        let orient_row: Vec<&str> = lines
            .next()
            .ok_or_else(|| EvalError::BadTable("missing orientation row".into()))?
            .split(',')
            .collect();
        if orient_row.first() != Some(&"orientation") || orient_row.len() != header.len() {
            return Err(EvalError::BadTable("second row must be the orientation row".into()));
        }
        let orientation = orient_row[1..]
            .iter()
            .map(|tok| match tok.trim() {
                "lower" => Ok(Orientation::Lower),
                "higher" => Ok(Orientation::Higher),
                other => Err(EvalError::BadTable(format!("unknown orientation {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (mut methods, mut scores) = (Vec::new(), Vec::new());
        for line in lines.filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != header.len() {
                return Err(EvalError::BadTable(format!(
                    "row {:?} has {} fields, expected {}",
                    fields[0],
                    fields.len(),
                    header.len()
                )));
            }
            let method = fields[0].trim().to_string();
            let row = fields[1..]
                .iter()
                .zip(&columns)
                .map(|(cell, col)| {
                    let cell = cell.trim();
                    if cell.is_empty() {
                        return Ok(None);
                    }
                    cell.parse::<f64>().map(Some).map_err(|_| {
                        EvalError::BadTable(format!(
                            "unparseable score {cell:?} for {method} in column {col}"
                        ))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            methods.push(method);
            scores.push(row);
        }
        Self::new(methods, columns, orientation, scores)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("method");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push_str("\norientation");
        for o in &self.orientation {
            out.push_str(match o {
                Orientation::Lower => ",lower",
                Orientation::Higher => ",higher",
            });
        }
        out.push('\n');
        for (m, row) in self.methods.iter().zip(&self.scores) {
            out.push_str(m);
            for cell in row {
                out.push(',');
                if let Some(v) = cell {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Per-column competition ranks (methods × columns): a method's rank is
/// 1 + the number of strictly better methods, so ties share the minimum
/// rank and tie-free columns rank as a permutation of 1..=#methods.
pub fn column_ranks(table: &RankTable) -> Result<Vec<Vec<usize>>, EvalError> {
    for (m, row) in table.methods.iter().zip(&table.scores) {
        for (c, cell) in row.iter().enumerate() {
            if cell.is_none() {
                return Err(EvalError::MissingCell {
                    method: m.clone(),
                    column: table.columns[c].clone(),
                });
            }
        }
    }
    let score = |m: usize, c: usize| table.scores[m][c].expect("checked complete");
    Ok((0..table.methods.len())
        .map(|m| {
            (0..table.columns.len())
                .map(|c| {
                    let mine = score(m, c);
                    1 + (0..table.methods.len())
                        .filter(|&other| table.orientation[c].beats(score(other, c), mine))
                        .count()
                })
                .collect()
        })
        .collect())
}

/// Mean rank across columns, per method (aligned with `table.methods`).
pub fn average_rank(table: &RankTable) -> Result<Vec<f64>, EvalError> {
    Ok(column_ranks(table)?
        .iter()
        .map(|ranks| ranks.iter().sum::<usize>() as f64 / ranks.len() as f64)
        .collect())
}

// ── End-to-end pointmap evaluation ──────────────────────────────────

/// Render a field along ground-truth LiDAR rays and score it: depth AbsRel
/// over every renderable ray, and Chamfer distance between the rendered
/// point cloud (weight floor applied, as in point-cloud emission) and the
/// ground-truth returns. Rays whose return lies outside the region are
/// excluded and tallied; the rest must originate at the scene's LiDAR.
pub fn eval_pointmap(
    source: &impl OccupancySource,
    scene: &SceneSpec,
    rays: &[Ray],
    render: &RayRenderConfig,
    roi: &RoiBox,
) -> Result<MetricReport, EvalError> {
    render.validate()?;
    if rays.is_empty() {
        return Err(EvalError::BadInput("no ground-truth rays".into()));
    }
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut pred_points = Vec::new();
    let mut gt_points = Vec::new();
    let (mut outside_roi, mut unrenderable, mut dropped) = (0u64, 0u64, 0u64);
    for (i, ray) in rays.iter().enumerate() {
        if ray.origin != scene.lidar.origin {
            return Err(EvalError::BadInput(format!(
                "ray {i} does not originate at the scene's LiDAR"
            )));
        }
        let Some(gt_depth) = ray.hit_distance else {
            return Err(EvalError::BadInput(format!("ray {i} carries no ground-truth return")));
        };
        if !(gt_depth.is_finite() && gt_depth > 0.0) {
            return Err(EvalError::BadInput(format!("ray {i} has ground truth {gt_depth}")));
        }
        let gt_point = ray.point_at(gt_depth);
        if !roi.contains(gt_point) {
            outside_roi += 1;
            continue;
        }
        let Some(profile) = render_ray_profile(ray, source, render, roi)? else {
            unrenderable += 1;
            continue;
        };
        preds.push(profile.depth);
        gts.push(gt_depth);
        gt_points.push(gt_point);
        if profile.total_weight >= POINT_WEIGHT_FLOOR {
            pred_points.push(ray.point_at(profile.depth));
        } else {
            dropped += 1;
        }
    }
    if preds.is_empty() {
        return Err(EvalError::EmptySupport(
            "every ground-truth return fell outside the region".into(),
        ));
    }
    let ar = absrel(&preds, &gts)?;
    if pred_points.is_empty() {
        return Err(EvalError::EmptySupport("no ray cleared the point weight floor".into()));
    }
    let origin = scene.lidar.origin;
    let cd = chamfer(
        &PointCloud::new(pred_points.clone(), origin),
        &PointCloud::new(gt_points.clone(), origin),
    )?;
    let report = MetricReport {
        metrics: BTreeMap::from([("absrel".into(), ar.value), ("chamfer_m".into(), cd)]),
        support: BTreeMap::from([
            ("absrel".into(), ar.evaluated as u64),
            ("chamfer_m".into(), (pred_points.len() + gt_points.len()) as u64),
        ]),
        notes: BTreeMap::from([
            ("rays_total".into(), rays.len() as u64),
            ("rays_evaluated".into(), preds.len() as u64),
            ("gt_outside_roi".into(), outside_roi),
            ("unrenderable".into(), unrenderable),
            ("dropped_low_weight".into(), dropped),
            ("pred_points".into(), pred_points.len() as u64),
            ("gt_points".into(), gt_points.len() as u64),
        ]),
        config: serde_json::to_value(render)?,
    };
    report.validate()?;
    Ok(report)
}

/// Chamfer-only comparison of two clouds (a pre-rendered baseline against
/// LiDAR returns, say). Ray-wise depth error needs a field; see
/// [`eval_pointmap`].
pub fn eval_cloud(pred: &PointCloud, gt: &PointCloud) -> Result<MetricReport, EvalError> {
    let cd = chamfer(pred, gt)?;
    let report = MetricReport {
        metrics: BTreeMap::from([("chamfer_m".into(), cd)]),
        support: BTreeMap::from([("chamfer_m".into(), (pred.len() + gt.len()) as u64)]),
        notes: BTreeMap::from([
            ("pred_points".into(), pred.len() as u64),
            ("gt_points".into(), gt.len() as u64),
        ]),
        config: serde_json::Value::Null,
    };
    report.validate()?;
    Ok(report)
}

// ── Tests ───────────────────────────────────────────────────────────
