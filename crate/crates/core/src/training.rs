//! Optimization loop: fresh labeled queries every step, binary cross-entropy
//! on decoder logits, AdamW with warmup–cosine scheduling and global-norm
//! clipping, periodic checkpoints, and a loss-history CSV.
//!
//! Scenes are drawn round-robin; per scene and step the supervision module
//! resamples a balanced query set (infinite-sample regime), so the model
//! never sees a fixed query dataset.

use crate::diffcore::{DiffError, Optimizer, OptimizerConfig, Tape, Tensor};
use crate::geometry::Ray;
use crate::io::IoError;
use crate::model::{
    forward_scene, pull_gradients, save_checkpoint, BoundParams, ModelConfig, ModelError,
    ParamStore,
};
use crate::rng::derive_seed;
use crate::simulator::{render_views, simulate_lidar, RenderedViews, SceneSpec, SimError};
use crate::supervision::{sample_queries, SamplingConfig, SupervisionError};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

// ── Errors ──────────────────────────────────────────────────────────

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("training needs at least one scene")]
    NoScenes,
    #[error("training diverged at step {step} ({cause}); last good checkpoint: {}",
            .last_good.as_ref().map_or("none".into(), |p| p.display().to_string()))]
    Diverged { step: usize, cause: String, last_good: Option<PathBuf> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Supervision(#[from] SupervisionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] IoError),
}

// ── Configuration ───────────────────────────────────────────────────

/// One training run. Counts here must agree with the embedded sampling
/// config: each scene contributes `positives + negatives` queries per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub warmup_iterations: usize,
    pub peak_lr: f64,
    /// Scenes per optimizer step (round-robin over the scene list).
    pub scenes_per_step: usize,
    /// Labeled queries drawn from each scene per step.
    pub queries_per_scene: usize,
    /// Steps between checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub sampling: SamplingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            warmup_iterations: 100,
            peak_lr: 1e-3,
            scenes_per_step: 2,
            queries_per_scene: 1024,
            checkpoint_every: 500,
            seed: 0,
            sampling: SamplingConfig {
                positives: 512,
                negatives: 512,
                symmetric_share: 102,
                ..SamplingConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if self.iterations == 0 || self.scenes_per_step == 0 || self.queries_per_scene == 0 {
            return bad("iterations, scenes per step and queries per scene must be positive".into());
        }
        if self.warmup_iterations >= self.iterations {
            return bad(format!(
                "warmup {} must be below iterations {}",
                self.warmup_iterations, self.iterations
            ));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint cadence must be positive".into());
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad(format!("peak learning rate {} must be positive", self.peak_lr));
        }
        if self.sampling.positives != self.sampling.negatives {
            return bad(format!(
                "batches must be balanced: {} positives vs {} negatives",
                self.sampling.positives, self.sampling.negatives
            ));
        }
        if self.sampling.positives + self.sampling.negatives != self.queries_per_scene {
            return bad(format!(
                "sampling yields {} queries per scene, config says {}",
                self.sampling.positives + self.sampling.negatives,
                self.queries_per_scene
            ));
        }
        self.sampling.validate().map_err(|e| TrainError::BadConfig(e.to_string()))?;
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_iterations as u64,
            total_steps: self.iterations as u64,
            ..OptimizerConfig::default()
        }
    }
}

// ── Loss ────────────────────────────────────────────────────────────

/// Mean binary cross-entropy of probabilities against boolean labels,
/// evaluated stably through the inverse sigmoid. Probabilities must lie
/// strictly inside (0, 1).
pub fn bce_loss(probs: &[f64], labels: &[bool]) -> Result<f64, TrainError> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(TrainError::BadConfig(format!(
            "need matching non-empty probability/label lists, got {} and {}",
            probs.len(),
            labels.len()
        )));
    }
    let mut sum = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        if !(p > 0.0 && p < 1.0) {
            return Err(TrainError::BadConfig(format!("probability {p} outside (0, 1)")));
        }
        let x = (p / (1.0 - p)).ln();
        let y = f64::from(y);
        sum += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    }
    Ok(sum / probs.len() as f64)
}

// ── History ─────────────────────────────────────────────────────────

/// One loss-history row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub fn write_loss_csv(path: &Path, history: &[StepRecord]) -> Result<(), TrainError> {
    let mut f = std::fs::File::create(path).map_err(IoError::from)?;
    writeln!(f, "step,loss,lr,grad_norm").map_err(IoError::from)?;
    for r in history {
        writeln!(f, "{},{},{},{}", r.step, r.loss, r.lr, r.grad_norm).map_err(IoError::from)?;
    }
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<StepRecord>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(IoError::from)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "step,loss,lr,grad_norm" {
        return Err(TrainError::BadConfig(format!("unexpected loss CSV header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(TrainError::BadConfig(format!("loss CSV line {}: {line:?}", i + 2)));
        }
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| TrainError::BadConfig(format!("loss CSV line {}: {e}", i + 2)))
        };
        out.push(StepRecord {
            step: fields[0]
                .parse()
                .map_err(|e| TrainError::BadConfig(format!("loss CSV line {}: {e}", i + 2)))?,
            loss: parse_f(fields[1])?,
            lr: parse_f(fields[2])?,
            grad_norm: parse_f(fields[3])?,
        });
    }
    Ok(out)
}

// ── Training loop ───────────────────────────────────────────────────

/// Everything a finished run leaves behind.
pub struct TrainedArtifacts {
    pub store: ParamStore,
    pub history: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

/// Per-scene immutable training inputs, prepared once.
struct PreparedScene {
    views: RenderedViews,
    rays: Vec<Ray>,
}

fn prepare_scenes(scenes: &[SceneSpec]) -> Result<Vec<PreparedScene>, TrainError> {
    scenes
        .iter()
        .map(|s| {
            let cloud = simulate_lidar(s)?;
            let rays = cloud.to_rays().map_err(|e| TrainError::BadConfig(e.to_string()))?;
            Ok(PreparedScene { views: render_views(s), rays })
        })
        .collect()
}

/// Fresh per-(step, slot) sampling seed so no two batches repeat.
fn step_sampling(cfg: &TrainConfig, step: usize, slot: usize) -> SamplingConfig {
    SamplingConfig {
        seed: derive_seed(cfg.seed, "train-queries", (step * cfg.scenes_per_step + slot) as u64),
        ..cfg.sampling.clone()
    }
}

/// Run the loop. Checkpoints and the loss CSV land in `out_dir` (created if
/// missing); a non-finite loss or gradient aborts with the last good
/// checkpoint named in the error.
pub fn train(
    scenes: &[SceneSpec],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainedArtifacts, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::NoScenes);
    }
    std::fs::create_dir_all(out_dir).map_err(IoError::from)?;
    let prepared = prepare_scenes(scenes)?;

    let mut store = ParamStore::init(model_cfg)?;
    let mut optimizer = Optimizer::new(cfg.optimizer_config(), store.params());
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut last_good: Option<PathBuf> = None;

    for step in 0..cfg.iterations {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&store, &mut tape);
        let mut scene_losses = Vec::with_capacity(cfg.scenes_per_step);
        for slot in 0..cfg.scenes_per_step {
            let scene = &prepared[(step * cfg.scenes_per_step + slot) % prepared.len()];
            let outcome = sample_queries(&scene.rays, &step_sampling(cfg, step, slot), &model_cfg.roi)?;
            let q = outcome.queries;
            debug_assert_eq!(
                q.labels.iter().filter(|&&l| l).count() * 2,
                q.len(),
                "balanced batch"
            );
            let (logits, _) = forward_scene(&mut tape, &bound, &scene.views, &q.points, model_cfg, None)?;
            let targets: Vec<f64> = q.labels.iter().map(|&l| f64::from(l)).collect();
            let t = tape.leaf(Tensor::new(vec![targets.len(), 1], targets)?);
            let losses = tape.bce_with_logits(logits, t)?;
            scene_losses.push(tape.mean(losses));
        }
        let mut total = scene_losses[0];
        for &l in &scene_losses[1..] {
            total = tape.add(total, l)?;
        }
        let loss = tape.scale(total, 1.0 / scene_losses.len() as f64);
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(TrainError::Diverged {
                step,
                cause: format!("loss {loss_value}"),
                last_good,
            });
        }
        tape.backward(loss)?;
        pull_gradients(&tape, &bound, &mut store);
        drop(tape);
        let stats = optimizer.step(store.params_mut()).map_err(|e| TrainError::Diverged {
            step,
            cause: e.to_string(),
            last_good: last_good.clone(),
        })?;
        history.push(StepRecord {
            step,
            loss: loss_value,
            lr: stats.lr,
            grad_norm: stats.grad_norm,
        });
        if (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.iterations {
            let path = out_dir.join(format!("checkpoint_{:06}.vgtc", step + 1));
            save_checkpoint(&path, model_cfg, &store)?;
            last_good = Some(path);
        }
    }

    let final_checkpoint = out_dir.join("checkpoint_final.vgtc");
    save_checkpoint(&final_checkpoint, model_cfg, &store)?;
    let loss_csv = out_dir.join("loss.csv");
    write_loss_csv(&loss_csv, &history)?;
    Ok(TrainedArtifacts { store, history, final_checkpoint, loss_csv })
}

// ── Tests ───────────────────────────────────────────────────────────
