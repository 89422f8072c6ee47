//! Calibration-free occupancy network: per-camera patch encoder, learned
//! query projector, multi-scale fusion into one top-down feature grid, and a
//! point-wise decoder mapping any in-region 3D point to an occupancy
//! probability.
//!
//! Nothing in this module reads camera poses or intrinsics — views arrive as
//! bare rasters and cameras are told apart only by learned slot embeddings.

mod net;
mod params;

pub use net::{
    concat_rows, decode_logits, decode_occupancy, embed_cameras, encode_views, forward_scene,
    fuse_maps, fused_grid, patch_tokens, project_to_bev,
};
pub use params::{pull_gradients, BoundParams, ParamStore};

use crate::diffcore::{DiffError, Tape, Tensor};
use crate::geometry::{GeometryError, RoiBox};
use crate::io::{self, IoError};
use crate::simulator::RenderedViews;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

// ── Errors ──────────────────────────────────────────────────────────

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("bad model input: {0}")]
    BadInput(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] IoError),
}

// ── Configuration ───────────────────────────────────────────────────

/// Attention schedule of the projector: which blocks cross-attend to camera
/// tokens and which self-attend among the queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorVariant {
    /// Single cross-attention block.
    Cross,
    /// Two sequential cross-attention blocks (default).
    CrossCross,
    /// Cross-attention, query self-attention, cross-attention.
    CrossSelfCross,
}

impl ProjectorVariant {
    /// Per block: `true` = cross-attention to camera tokens, `false` = query
    /// self-attention.
    pub fn schedule(&self) -> &'static [bool] {
        match self {
            ProjectorVariant::Cross => &[true],
            ProjectorVariant::CrossCross => &[true, true],
            ProjectorVariant::CrossSelfCross => &[true, false, true],
        }
    }

    pub fn blocks(&self) -> usize {
        self.schedule().len()
    }
}

impl std::fmt::Display for ProjectorVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProjectorVariant::Cross => "cross",
            ProjectorVariant::CrossCross => "cross_cross",
            ProjectorVariant::CrossSelfCross => "cross_self_cross",
        })
    }
}

impl std::str::FromStr for ProjectorVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cross" => Ok(ProjectorVariant::Cross),
            "cross_cross" => Ok(ProjectorVariant::CrossCross),
            "cross_self_cross" => Ok(ProjectorVariant::CrossSelfCross),
            other => Err(format!(
                "unknown projector variant {other:?} (expected cross, cross_cross or cross_self_cross)"
            )),
        }
    }
}

/// Full architectural description; two stores built from equal configs are
/// bit-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub cameras: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Square patch edge in pixels.
    pub patch_size: usize,
    /// Encoder blocks.
    pub depth: usize,
    /// Token channel count; also the query channel count.
    pub width: usize,
    pub heads: usize,
    /// 1-based encoder layers whose outputs feed the projector, ascending.
    pub tapped_layers: Vec<usize>,
    /// Query grid is `query_side²` learned latents per tapped layer.
    pub query_side: usize,
    pub query_channels: usize,
    /// Fused top-down grid resolution (per side) and channels.
    pub fused_side: usize,
    pub fused_channels: usize,
    /// Decoder layer widths: an input projection then residual blocks, so
    /// all entries must be equal.
    pub decoder_hidden: Vec<usize>,
    pub projector: ProjectorVariant,
    pub roi: RoiBox,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: trainable on one CPU core in minutes.
    fn default() -> Self {
        ModelConfig {
            cameras: 4,
            image_height: 64,
            image_width: 64,
            patch_size: 8,
            depth: 6,
            width: 128,
            heads: 4,
            tapped_layers: vec![3, 4, 5, 6],
            query_side: 16,
            query_channels: 128,
            fused_side: 64,
            fused_channels: 64,
            decoder_hidden: vec![128, 128],
            projector: ProjectorVariant::CrossCross,
            roi: RoiBox::desk(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Street-scale preset kept for documentation; far too large to train
    /// here and not an acceptance target.
    pub fn full_scale() -> Self {
        ModelConfig {
            cameras: 6,
            image_height: 224,
            image_width: 416,
            patch_size: 16,
            depth: 24,
            width: 1024,
            heads: 16,
            tapped_layers: vec![21, 22, 23, 24],
            query_side: 32,
            query_channels: 1024,
            fused_side: 256,
            fused_channels: 256,
            decoder_hidden: vec![256, 256],
            projector: ProjectorVariant::CrossCross,
            roi: RoiBox::full_scale(),
            seed: 0,
        }
    }

    /// Minimal valid configuration (2 cameras, 16×16 rasters) for fast tests.
    pub fn tiny_for_tests() -> Self {
        ModelConfig {
            cameras: 2,
            image_height: 16,
            image_width: 16,
            patch_size: 8,
            depth: 2,
            width: 16,
            heads: 2,
            tapped_layers: vec![1, 2],
            query_side: 4,
            query_channels: 16,
            fused_side: 8,
            fused_channels: 8,
            decoder_hidden: vec![16, 16],
            projector: ProjectorVariant::CrossCross,
            roi: RoiBox::desk(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        if self.cameras == 0 {
            return bad("camera count must be positive".into());
        }
        if self.patch_size == 0 {
            return bad("patch size must be positive".into());
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return bad(format!(
                "raster {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return bad("raster dims must be positive".into());
        }
        if self.depth == 0 {
            return bad("encoder depth must be positive".into());
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.tapped_layers.is_empty() {
            return bad("at least one tapped layer required".into());
        }
        if !self.tapped_layers.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!("tapped layers {:?} must be strictly ascending", self.tapped_layers));
        }
        if self.tapped_layers[0] < 1 || *self.tapped_layers.last().unwrap() > self.depth {
            return bad(format!(
                "tapped layers {:?} outside 1..={}",
                self.tapped_layers, self.depth
            ));
        }
        if !self.query_side.is_power_of_two() || !self.fused_side.is_power_of_two() {
            return bad(format!(
                "grid sides must be powers of two (query {}, fused {})",
                self.query_side, self.fused_side
            ));
        }
        if self.fused_side < self.query_side {
            return bad(format!(
                "fused side {} smaller than query side {}",
                self.fused_side, self.query_side
            ));
        }
        if self.query_channels != self.width {
            return bad(format!(
                "query channels {} must equal width {} (queries and tokens share attention space)",
                self.query_channels, self.width
            ));
        }
        if self.fused_channels == 0 {
            return bad("fused channels must be positive".into());
        }
        if self.decoder_hidden.is_empty() || self.decoder_hidden.contains(&0) {
            return bad("decoder hidden widths must be non-empty and positive".into());
        }
        if self.decoder_hidden.windows(2).any(|w| w[0] != w[1]) {
            return bad(format!(
                "decoder hidden widths {:?} must all be equal (residual blocks)",
                self.decoder_hidden
            ));
        }
        let e = self.roi.extent();
        if e.iter().any(|&v| v <= 0.0) {
            return bad("roi must have positive extent".into());
        }
        Ok(())
    }

    pub fn patches_per_camera(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Upsample-conv stages between the query grid and the fused grid.
    pub fn fusion_stages(&self) -> usize {
        (self.fused_side / self.query_side).trailing_zeros() as usize
    }
}

// ── Attention records ───────────────────────────────────────────────

/// Head-averaged attention weights of one cross-attention block: query rows
/// against the concatenated camera tokens.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    /// Parameter prefix of the block that produced this map.
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Tokens per camera; columns `[c·t, (c+1)·t)` belong to camera `c`.
    pub tokens_per_camera: usize,
    /// Row-major `rows × cols`.
    pub mean_weights: Vec<f64>,
}

impl AttentionRecord {
    pub fn cameras(&self) -> usize {
        self.cols / self.tokens_per_camera
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.mean_weights[r * self.cols..(r + 1) * self.cols]
    }

    /// Attention mass aggregated per camera, row-major `rows × cameras`;
    /// each row sums to 1 like the underlying distribution.
    pub fn camera_mass(&self) -> Vec<f64> {
        let cams = self.cameras();
        let mut out = vec![0.0; self.rows * cams];
        for r in 0..self.rows {
            for (c, chunk) in self.row(r).chunks(self.tokens_per_camera).enumerate() {
                out[r * cams + c] = chunk.iter().sum();
            }
        }
        out
    }

    /// Per query row, the camera receiving the most attention mass.
    pub fn dominant_camera(&self) -> Vec<usize> {
        let cams = self.cameras();
        self.camera_mass()
            .chunks(cams)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// Run the view-dependent forward once and return every cross-attention map.
pub fn attention_records(
    cfg: &ModelConfig,
    store: &ParamStore,
    views: &RenderedViews,
) -> Result<Vec<AttentionRecord>, ModelError> {
    let frozen = store.frozen_clone();
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&frozen, &mut tape);
    let mut records = Vec::new();
    net::fused_grid(&mut tape, &bound, views, cfg, Some(&mut records))?;
    Ok(records)
}

// ── Checkpoints ─────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 4] = b"VGTC";
const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

fn malformed(reason: impl Into<String>) -> IoError {
    IoError::Malformed { format: "VGTC", reason: reason.into() }
}

/// Write config JSON plus every parameter tensor (f64 LE) to one file.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<(), ModelError> {
    let file = std::fs::File::create(path).map_err(IoError::from)?;
    let mut w = BufWriter::new(file);
    io::write_header(&mut w, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let cfg_json = serde_json::to_vec(cfg).map_err(|e| malformed(e.to_string()))?;
    w.write_u32::<LittleEndian>(cfg_json.len() as u32).map_err(IoError::from)?;
    w.write_all(&cfg_json).map_err(IoError::from)?;
    w.write_u32::<LittleEndian>(store.len() as u32).map_err(IoError::from)?;
    for p in store.params() {
        w.write_u32::<LittleEndian>(p.name.len() as u32).map_err(IoError::from)?;
        w.write_all(p.name.as_bytes()).map_err(IoError::from)?;
        w.write_u8(DTYPE_F64).map_err(IoError::from)?;
        w.write_u8(p.tensor.shape().len() as u8).map_err(IoError::from)?;
        for &d in p.tensor.shape() {
            w.write_u32::<LittleEndian>(d as u32).map_err(IoError::from)?;
        }
        for &v in p.tensor.data() {
            w.write_f64::<LittleEndian>(v).map_err(IoError::from)?;
        }
    }
    w.flush().map_err(IoError::from)?;
    Ok(())
}

/// Read a checkpoint back. The config is validated, a fresh store built from
/// it, and every stored tensor matched by name and shape — extra, missing, or
/// misshapen tensors are errors.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore), ModelError> {
    let file = std::fs::File::open(path).map_err(IoError::from)?;
    let mut r = BufReader::new(file);
    io::read_header(&mut r, "VGTC", CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let cfg_len = r.read_u32::<LittleEndian>().map_err(IoError::from)? as usize;
    let mut cfg_json = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_json).map_err(IoError::from)?;
    let cfg: ModelConfig =
        serde_json::from_slice(&cfg_json).map_err(|e| malformed(format!("config: {e}")))?;
    let mut store = ParamStore::init(&cfg)?;
    let count = r.read_u32::<LittleEndian>().map_err(IoError::from)? as usize;
    if count != store.len() {
        return Err(ModelError::CheckpointMismatch(format!(
            "file has {count} tensors, config implies {}",
            store.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(IoError::from)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(IoError::from)?;
        let name = String::from_utf8(name).map_err(|e| malformed(e.to_string()))?;
        let dtype = r.read_u8().map_err(IoError::from)?;
        if dtype != DTYPE_F64 {
            return Err(malformed(format!("tensor {name}: unsupported dtype {dtype}")).into());
        }
        let rank = r.read_u8().map_err(IoError::from)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u32::<LittleEndian>().map_err(IoError::from)? as usize);
        }
        if !store.contains(&name) {
            return Err(ModelError::CheckpointMismatch(format!("unexpected tensor {name}")));
        }
        if !seen.insert(name.clone()) {
            return Err(ModelError::CheckpointMismatch(format!("duplicate tensor {name}")));
        }
        let expected = store.get(&name).shape().to_vec();
        if dims != expected {
            return Err(ModelError::CheckpointMismatch(format!(
                "tensor {name}: stored shape {dims:?}, config implies {expected:?}"
            )));
        }
        let numel: usize = dims.iter().product();
        let mut data = vec![0.0f64; numel];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(IoError::from)?;
        store.get_mut(&name).set_data(data);
    }
    Ok((cfg, store))
}

// ── Frozen inference handle ─────────────────────────────────────────

/// Read-only occupancy field: parameters plus the cached fused grid for one
/// view set. Point queries touch only the cached grid and the decoder, never
/// the encoder — `encoder_calls` proves it.
pub struct OccupancyFieldHandle {
    cfg: ModelConfig,
    store: ParamStore,
    fused: Tensor,
    encoder_calls: AtomicUsize,
}

/// Decoder batches are chunked so huge query sets don't build huge graphs.
const QUERY_CHUNK: usize = 16_384;

impl OccupancyFieldHandle {
    /// Run encoder + projection + fusion once and cache the result.
    pub fn freeze(cfg: &ModelConfig, store: &ParamStore, views: &RenderedViews) -> Result<Self, ModelError> {
        let mut handle = OccupancyFieldHandle {
            cfg: cfg.clone(),
            store: store.frozen_clone(),
            fused: Tensor::scalar(0.0),
            encoder_calls: AtomicUsize::new(0),
        };
        handle.refresh(views)?;
        Ok(handle)
    }

    /// Re-encode a new view set, replacing the cached grid.
    pub fn refresh(&mut self, views: &RenderedViews) -> Result<(), ModelError> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&self.store, &mut tape);
        let fused = net::fused_grid(&mut tape, &bound, views, &self.cfg, None)?;
        self.fused = tape.value(fused).clone();
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Occupancy probability for each metric point, in input order.
    pub fn query(&self, points: &[[f64; 3]]) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(QUERY_CHUNK) {
            let mut tape = Tape::new();
            let bound = BoundParams::bind_filtered(&self.store, &mut tape, |n| n.starts_with("dec."));
            let fused = tape.leaf(self.fused.clone());
            let probs = net::decode_occupancy(&mut tape, &bound, fused, chunk, &self.cfg)?;
            out.extend_from_slice(tape.value(probs).data());
        }
        Ok(out)
    }

    /// Times the encoder has run since freezing (1 unless refreshed).
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    pub fn fused_map(&self) -> &Tensor {
        &self.fused
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }
}

// ── Tests ───────────────────────────────────────────────────────────
