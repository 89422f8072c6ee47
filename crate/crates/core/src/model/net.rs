//! Differentiable forward passes: per-camera token encoder, query projector,
//! map fusion, and the point-wise occupancy decoder.
//!
//! Every function here only *builds* graph on a caller-owned [`Tape`]; no
//! parameter state lives in this file. Cameras are encoded independently —
//! information mixes across cameras only in the projector, where all cameras'
//! tokens form one key/value set. No camera poses or intrinsics appear
//! anywhere.

use super::params::BoundParams;
use super::{AttentionRecord, ModelConfig, ModelError};
use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::simulator::RenderedViews;

// ── Tokenization ────────────────────────────────────────────────────

/// Cut each camera raster into non-overlapping `p`×`p` patches, row-major
/// over the patch grid. Each token row holds the patch's inverse-depth
/// pixels (row-major) followed by its mask pixels: `p²·2` features.
pub fn patch_tokens(views: &RenderedViews, cfg: &ModelConfig) -> Result<Vec<Tensor>, ModelError> {
    if views.cameras.len() != cfg.cameras {
        return Err(ModelError::BadInput(format!(
            "expected {} cameras, got {}",
            cfg.cameras,
            views.cameras.len()
        )));
    }
    let p = cfg.patch_size;
    let mut out = Vec::with_capacity(views.cameras.len());
    for (i, cam) in views.cameras.iter().enumerate() {
        if cam.height != cfg.image_height || cam.width != cfg.image_width {
            return Err(ModelError::BadInput(format!(
                "camera {i}: raster {}x{} does not match config {}x{}",
                cam.height, cam.width, cfg.image_height, cfg.image_width
            )));
        }
        let (ph, pw) = (cam.height / p, cam.width / p);
        let mut data = Vec::with_capacity(ph * pw * p * p * 2);
        for pr in 0..ph {
            for pc in 0..pw {
                for plane in [&cam.inv_depth, &cam.mask] {
                    for r in 0..p {
                        let row = pr * p + r;
                        let col = pc * p;
                        data.extend_from_slice(&plane[row * cam.width + col..row * cam.width + col + p]);
                    }
                }
            }
        }
        out.push(Tensor::new(vec![ph * pw, p * p * 2], data)?);
    }
    Ok(out)
}

// ── Building blocks ─────────────────────────────────────────────────

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// Stack 2-D vars with a common last dim into one matrix (flatten → concat →
/// reshape; row order follows `parts`).
pub fn concat_rows(tape: &mut Tape, parts: &[Var]) -> Result<Var, DiffError> {
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    let width = tape.value(parts[0]).last_dim();
    let mut rows = 0;
    let mut flats = Vec::with_capacity(parts.len());
    for &p in parts {
        let t = tape.value(p);
        rows += t.shape()[0];
        let n = t.numel();
        flats.push(tape.reshape(p, vec![1, n])?);
    }
    let cat = tape.concat_lastdim(&flats)?;
    tape.reshape(cat, vec![rows, width])
}

/// Multi-head attention with separate per-head projections. Returns the
/// output and, when asked, the head-averaged attention matrix.
fn attention(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    cfg: &ModelConfig,
    want_weights: bool,
) -> Result<(Var, Option<Vec<f64>>), DiffError> {
    let head_dim = cfg.width / cfg.heads;
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut mean: Option<Vec<f64>> = None;
    for h in 0..cfg.heads {
        let q = tape.matmul(q_in, bound.var(&format!("{prefix}.attn.q{h}.w")))?;
        let k = tape.matmul(kv_in, bound.var(&format!("{prefix}.attn.k{h}.w")))?;
        let v = tape.matmul(kv_in, bound.var(&format!("{prefix}.attn.v{h}.w")))?;
        let kt = tape.transpose_2d(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, inv_sqrt);
        let attn = tape.softmax_lastdim(scaled);
        if want_weights {
            let d = tape.value(attn).data();
            match &mut mean {
                None => mean = Some(d.to_vec()),
                Some(acc) => acc.iter_mut().zip(d).for_each(|(a, v)| *a += v),
            }
        }
        heads.push(tape.matmul(attn, v)?);
    }
    let concat = tape.concat_lastdim(&heads)?;
    let out = linear(
        tape,
        concat,
        bound.var(&format!("{prefix}.attn.out.w")),
        bound.var(&format!("{prefix}.attn.out.b")),
    )?;
    if let Some(m) = &mut mean {
        let inv = 1.0 / cfg.heads as f64;
        m.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((out, mean))
}

/// Post-norm transformer block: attention + residual + layer norm, then
/// feed-forward + residual + layer norm. `kv = None` means self-attention;
/// `Some` makes it a cross-attention block over that context.
fn transformer_block(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
    kv: Option<Var>,
    cfg: &ModelConfig,
    mut records: Option<&mut Vec<AttentionRecord>>,
) -> Result<Var, DiffError> {
    let kv_in = kv.unwrap_or(x);
    let want = records.is_some() && kv.is_some();
    let (attn, weights) = attention(tape, bound, prefix, x, kv_in, cfg, want)?;
    if let (Some(recs), Some(mean_weights)) = (records.as_deref_mut(), weights) {
        let rows = tape.value(x).shape()[0];
        let cols = tape.value(kv_in).shape()[0];
        recs.push(AttentionRecord {
            name: prefix.to_string(),
            rows,
            cols,
            tokens_per_camera: cfg.patches_per_camera(),
            mean_weights,
        });
    }
    let res1 = tape.add(x, attn)?;
    let x = tape.layer_norm(
        res1,
        bound.var(&format!("{prefix}.ln1.g")),
        bound.var(&format!("{prefix}.ln1.b")),
    )?;
    let h = linear(tape, x, bound.var(&format!("{prefix}.ff.w1")), bound.var(&format!("{prefix}.ff.b1")))?;
    let h = tape.gelu(h);
    let ff = linear(tape, h, bound.var(&format!("{prefix}.ff.w2")), bound.var(&format!("{prefix}.ff.b2")))?;
    let res2 = tape.add(x, ff)?;
    tape.layer_norm(
        res2,
        bound.var(&format!("{prefix}.ln2.g")),
        bound.var(&format!("{prefix}.ln2.b")),
    )
}

// ── Encoder ─────────────────────────────────────────────────────────

/// Project patch tokens into model width and add the per-camera-slot
/// positional embedding. One output var per camera, `[patches, width]`.
pub fn embed_cameras(
    tape: &mut Tape,
    bound: &BoundParams,
    tokens: &[Tensor],
    cfg: &ModelConfig,
) -> Result<Vec<Var>, ModelError> {
    if tokens.len() != cfg.cameras {
        return Err(ModelError::BadInput(format!(
            "expected {} token sets, got {}",
            cfg.cameras,
            tokens.len()
        )));
    }
    let w = bound.var("enc.patch.w");
    let b = bound.var("enc.patch.b");
    let mut out = Vec::with_capacity(tokens.len());
    for (c, t) in tokens.iter().enumerate() {
        let x = tape.leaf(t.clone());
        let x = linear(tape, x, w, b)?;
        let pos = bound.var(&format!("enc.pos.cam{c}"));
        out.push(tape.add(x, pos)?);
    }
    Ok(out)
}

/// Run the shared-weight encoder over each camera independently and capture
/// the token matrices at the tapped layers. Returns `[tapped][camera]`.
pub fn encode_views(
    tape: &mut Tape,
    bound: &BoundParams,
    tokens: &[Tensor],
    cfg: &ModelConfig,
) -> Result<Vec<Vec<Var>>, ModelError> {
    let cams = embed_cameras(tape, bound, tokens, cfg)?;
    let mut taps: Vec<Vec<Var>> = vec![Vec::with_capacity(cfg.cameras); cfg.tapped_layers.len()];
    for &start in &cams {
        let mut x = start;
        let mut ti = 0;
        for l in 1..=cfg.depth {
            x = transformer_block(tape, bound, &format!("enc.block{l}"), x, None, cfg, None)?;
            if ti < cfg.tapped_layers.len() && cfg.tapped_layers[ti] == l {
                taps[ti].push(x);
                ti += 1;
            }
        }
    }
    Ok(taps)
}

// ── Projector ───────────────────────────────────────────────────────

/// Attend this layer's learned query latents to the concatenated camera
/// tokens and reshape the result into a `[channels, side, side]` map.
/// Query index `iy·side + ix` owns grid cell `(ix, iy)`.
pub fn project_to_bev(
    tape: &mut Tape,
    bound: &BoundParams,
    layer: usize,
    tokens: Var,
    cfg: &ModelConfig,
    mut records: Option<&mut Vec<AttentionRecord>>,
) -> Result<Var, DiffError> {
    let mut x = bound.var(&format!("proj.layer{layer}.queries"));
    for (b, &is_cross) in cfg.projector.schedule().iter().enumerate() {
        let kv = if is_cross { Some(tokens) } else { None };
        x = transformer_block(
            tape,
            bound,
            &format!("proj.layer{layer}.block{b}"),
            x,
            kv,
            cfg,
            records.as_deref_mut(),
        )?;
    }
    let t = tape.transpose_2d(x)?;
    tape.reshape(t, vec![cfg.query_channels, cfg.query_side, cfg.query_side])
}

// ── Fusion ──────────────────────────────────────────────────────────

/// Channel-concatenate the per-layer maps, then repeat
/// (2× nearest upsample → 3×3 conv → relu) until the fused resolution is
/// reached, ending in a 1×1 channel projection.
pub fn fuse_maps(tape: &mut Tape, bound: &BoundParams, maps: &[Var], cfg: &ModelConfig) -> Result<Var, DiffError> {
    // channel-concat of [C,H,W] maps is row-concat of their flattened data
    let s = cfg.query_side;
    let mut flats = Vec::with_capacity(maps.len());
    for &m in maps {
        let n = tape.value(m).numel();
        flats.push(tape.reshape(m, vec![1, n])?);
    }
    let cat = tape.concat_lastdim(&flats)?;
    let c_cat = cfg.tapped_layers.len() * cfg.query_channels;
    let mut x = tape.reshape(cat, vec![c_cat, s, s])?;
    for st in 0..cfg.fusion_stages() {
        x = tape.upsample_nearest_2x(x)?;
        x = tape.conv2d(
            x,
            bound.var(&format!("fuse.stage{st}.conv.w")),
            bound.var(&format!("fuse.stage{st}.conv.b")),
            3,
        )?;
        x = tape.relu(x);
    }
    tape.conv2d(x, bound.var("fuse.proj.w"), bound.var("fuse.proj.b"), 1)
}

// ── Decoder ─────────────────────────────────────────────────────────

/// Occupancy logits for metric points: bilinearly sample the fused map at
/// each point's normalized (x, y), concatenate the normalized 3D point
/// (height enters the model only here), and run the residual MLP.
pub fn decode_logits(
    tape: &mut Tape,
    bound: &BoundParams,
    fused: Var,
    points: &[[f64; 3]],
    cfg: &ModelConfig,
) -> Result<Var, ModelError> {
    if points.is_empty() {
        return Err(ModelError::BadInput("no query points".into()));
    }
    let n = points.len();
    let mut xy = Vec::with_capacity(2 * n);
    let mut xyz = Vec::with_capacity(3 * n);
    for p in points {
        let np = cfg.roi.normalize_point(*p)?;
        xy.extend_from_slice(&np[..2]);
        xyz.extend_from_slice(&np);
    }
    let coords = tape.leaf(Tensor::new(vec![n, 2], xy)?);
    let pts = tape.leaf(Tensor::new(vec![n, 3], xyz)?);
    let feats = tape.bilinear_sample_2d(fused, coords)?;
    let x = tape.concat_lastdim(&[feats, pts])?;
    let h = linear(tape, x, bound.var("dec.in.w"), bound.var("dec.in.b"))?;
    let mut h = tape.relu(h);
    for i in 1..cfg.decoder_hidden.len() {
        let r = linear(tape, h, bound.var(&format!("dec.res{i}.w")), bound.var(&format!("dec.res{i}.b")))?;
        let r = tape.relu(r);
        h = tape.add(h, r)?;
    }
    Ok(linear(tape, h, bound.var("dec.out.w"), bound.var("dec.out.b"))?)
}

/// [`decode_logits`] followed by a sigmoid: probabilities in (0, 1).
pub fn decode_occupancy(
    tape: &mut Tape,
    bound: &BoundParams,
    fused: Var,
    points: &[[f64; 3]],
    cfg: &ModelConfig,
) -> Result<Var, ModelError> {
    let logits = decode_logits(tape, bound, fused, points, cfg)?;
    Ok(tape.sigmoid(logits))
}

// ── Full pipeline ───────────────────────────────────────────────────

/// Encoder → per-tapped-layer projection → fusion. The expensive,
/// view-dependent part of the forward pass; its output is what a frozen
/// handle caches.
pub fn fused_grid(
    tape: &mut Tape,
    bound: &BoundParams,
    views: &RenderedViews,
    cfg: &ModelConfig,
    mut records: Option<&mut Vec<AttentionRecord>>,
) -> Result<Var, ModelError> {
    let tokens = patch_tokens(views, cfg)?;
    let taps = encode_views(tape, bound, &tokens, cfg)?;
    let mut maps = Vec::with_capacity(taps.len());
    for (i, &l) in cfg.tapped_layers.iter().enumerate() {
        let kv = concat_rows(tape, &taps[i])?;
        maps.push(project_to_bev(tape, bound, l, kv, cfg, records.as_deref_mut())?);
    }
    Ok(fuse_maps(tape, bound, &maps, cfg)?)
}

/// End-to-end forward: views + metric points → (logits, fused map).
pub fn forward_scene(
    tape: &mut Tape,
    bound: &BoundParams,
    views: &RenderedViews,
    points: &[[f64; 3]],
    cfg: &ModelConfig,
    records: Option<&mut Vec<AttentionRecord>>,
) -> Result<(Var, Var), ModelError> {
    let fused = fused_grid(tape, bound, views, cfg, records)?;
    let logits = decode_logits(tape, bound, fused, points, cfg)?;
    Ok((logits, fused))
}
