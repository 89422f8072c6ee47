//! `bevocc`: the command-line surface over the occupancy-field pipeline.
//!
//! Subcommands cover the whole loop — synthetic scene generation, LiDAR
//! simulation, query labeling, training, rendering, evaluation, ranking,
//! attention dumps, and the sampling-strategy ablation. Every command
//! writes its outputs plus a JSON run manifest holding the effective
//! config (and its order-independent SHA-256), the seed, input/output
//! paths, and per-stage wall-clock timings; re-running a command with the
//! recorded config and seed reproduces its outputs bit-exactly.
//!
//! Exit codes: 0 success, 1 validation/config errors, 2 runtime failures
//! (divergence, I/O) — with the manifest still written when one was due.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bevocc_core::evaluation::{
    average_rank, column_ranks, eval_cloud, eval_pointmap, occupancy_scores, visibility_mask,
    MetricReport, RankTable,
};
use bevocc_core::geometry::{PointCloud, RoiBox, Vec3};
use bevocc_core::model::{
    attention_records, load_checkpoint, AttentionRecord, ModelConfig, OccupancyFieldHandle,
};
use bevocc_core::rendering::{
    render_point_cloud, render_voxel_grid, IndicatorField, RayRenderConfig, VoxelRenderConfig,
};
use bevocc_core::simulator::{
    drop_cameras, generate_scene, render_views, scan_rays, simulate_lidar, GeneratorConfig,
    SceneSpec,
};
use bevocc_core::supervision::{queries_from_cloud, SamplingConfig, SamplingStrategy};
use bevocc_core::training::{train, TrainConfig};

/// Default-output-directory environment variable, consulted whenever
/// `--out`/`--out-dir` is omitted.
const OUT_DIR_ENV: &str = "BEVOCC_OUT_DIR";

// ── Failure classification ──────────────────────────────────────────

/// Validation failures exit 1 (bad flags, configs, tables); runtime
/// failures exit 2 (divergence, I/O, rendering) and still emit a manifest.
enum Failure {
    Validation(String),
    Runtime(String),
}

fn bad(e: impl Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn rt(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type CmdResult = Result<(), Failure>;

// ── Run manifests ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct StageTime {
    stage: String,
    seconds: f64,
}

/// The provenance record every command emits.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    tool: String,
    version: String,
    command: String,
    seed: Option<u64>,
    /// SHA-256 of the canonical (key-sorted) serialization of `config`,
    /// so semantically equal configs hash equal regardless of key order.
    config_sha256: String,
    config: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    timings_s: Vec<StageTime>,
    status: String,
}

/// Accumulates manifest fields while a command runs, so a runtime failure
/// can still flush what is known.
struct Draft {
    command: String,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    timings: Vec<StageTime>,
    manifest_path: Option<PathBuf>,
    status: String,
}

impl Draft {
    fn new(command: &str) -> Self {
        Draft {
            command: command.to_string(),
            seed: None,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
            manifest_path: None,
            status: "ok".into(),
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T, Failure>) -> Result<T, Failure> {
        let t0 = Instant::now();
        let result = f();
        self.timings.push(StageTime { stage: stage.into(), seconds: t0.elapsed().as_secs_f64() });
        result
    }

    fn write(&mut self) -> Result<(), String> {
        let Some(path) = self.manifest_path.clone() else { return Ok(()) };
        let manifest = RunManifest {
            tool: "bevocc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.clone(),
            seed: self.seed,
            config_sha256: config_sha256(&self.config),
            config: self.config.clone(),
            inputs: self.inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            timings_s: std::mem::take(&mut self.timings),
            status: self.status.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| e.to_string())?;
        std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

/// serde_json maps are ordered (BTreeMap-backed), so serializing a `Value`
/// is already canonical: equal documents hash equal under key reordering.
fn config_sha256(config: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(config).unwrap_or_default();
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ── Shared plumbing ─────────────────────────────────────────────────

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("{what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(format!("{what} {}: {e}", path.display())))
}

fn load_json_or_default<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
    what: &str,
) -> Result<T, Failure> {
    match path {
        Some(p) => load_json(p, what),
        None => Ok(T::default()),
    }
}

fn load_scene(path: &Path) -> Result<SceneSpec, Failure> {
    SceneSpec::load(path).map_err(|e| Failure::Validation(format!("scene {}: {e}", path.display())))
}

/// `--out` fallback: `$BEVOCC_OUT_DIR/<default_name>`.
fn resolve_out(flag: &Option<PathBuf>, default_name: &str) -> Result<PathBuf, Failure> {
    match flag {
        Some(p) => Ok(p.clone()),
        None => match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) => Ok(PathBuf::from(dir).join(default_name)),
            None => Err(Failure::Validation(format!(
                "no --out given and {OUT_DIR_ENV} is unset"
            ))),
        },
    }
}

/// Create the parent directory and return the sibling manifest path.
fn prepare_out_file(path: &Path) -> Result<PathBuf, Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(rt)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    Ok(path.with_file_name(format!("{name}.manifest.json")))
}

fn prepare_out_dir(path: &Path) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(path).map_err(rt)?;
    Ok(path.join("manifest.json"))
}

fn parse_roi(s: &str) -> Result<RoiBox, String> {
    match s {
        "desk" => return Ok(RoiBox::desk()),
        "full" => return Ok(RoiBox::full_scale()),
        _ => {}
    }
    let vals: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("roi component {t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if vals.len() != 6 {
        return Err("expected `desk`, `full`, or six numbers min_x,min_y,min_z,max_x,max_y,max_z".into());
    }
    RoiBox::new([vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]]).map_err(|e| e.to_string())
}

fn parse_voxel_size(s: &str) -> Result<VoxelSize, String> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("voxel size {t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let size = match vals[..] {
        [v] => [v, v, v],
        [x, y, z] => [x, y, z],
        _ => return Err("expected one edge length or three: x,y,z".into()),
    };
    if size.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(format!("voxel size must be positive and finite, got {size:?}"));
    }
    Ok(VoxelSize(size))
}

/// Newtype so clap can carry a `[f64; 3]` through a custom parser.
#[derive(Clone, Copy, Debug)]
struct VoxelSize(Vec3);

/// Load a checkpoint and freeze a queryable field over the given views.
fn freeze_field(
    checkpoint: &Path,
    scene: &SceneSpec,
    draft: &mut Draft,
) -> Result<(ModelConfig, OccupancyFieldHandle), Failure> {
    draft.input(checkpoint);
    let (cfg, store) = load_checkpoint(checkpoint)
        .map_err(|e| Failure::Validation(format!("checkpoint {}: {e}", checkpoint.display())))?;
    let views = draft.time("render_views", || Ok(render_views(scene)))?;
    let handle =
        draft.time("encode", || OccupancyFieldHandle::freeze(&cfg, &store, &views).map_err(rt))?;
    Ok((cfg, handle))
}

// ── CLI surface ─────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "bevocc",
    version,
    about = "Self-supervised occupancy fields from surround views, end to end",
    after_help = format!("Set {OUT_DIR_ENV} to give omitted --out/--out-dir flags a home.")
)]
struct Cli {
    /// Cap the worker-thread count (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic scenes.
    #[command(subcommand)]
    Scene(SceneCmd),
    /// LiDAR simulation.
    #[command(subcommand)]
    Lidar(LidarCmd),
    /// Supervision labels.
    #[command(subcommand)]
    Labels(LabelsCmd),
    /// Train an occupancy field on one or more scenes.
    Train(TrainArgs),
    /// Render a trained field.
    #[command(subcommand)]
    Render(RenderCmd),
    /// Score predictions against ground truth.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Rank methods across a score table.
    Rank(RankArgs),
    /// Attention introspection.
    #[command(subcommand)]
    Attn(AttnCmd),
    /// Controlled comparisons.
    #[command(subcommand)]
    Ablate(AblateCmd),
}

#[derive(Subcommand)]
enum SceneCmd {
    /// Generate a seeded synthetic scene (JSON).
    Gen(SceneGenArgs),
}

#[derive(Args)]
struct SceneGenArgs {
    #[arg(long)]
    seed: u64,
    /// Generator config JSON (GeneratorConfig schema); defaults baked in.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output scene path [default: $BEVOCC_OUT_DIR/scene.json].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum LidarCmd {
    /// Cast the scene's LiDAR sweep into a point cloud (LPCD).
    Sim(LidarSimArgs),
}

#[derive(Args)]
struct LidarSimArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum LabelsCmd {
    /// Sample labeled occupancy queries from the scene's LiDAR (LQRY).
    Make(LabelsMakeArgs),
}

#[derive(Args)]
struct LabelsMakeArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Sampling config JSON (SamplingConfig schema).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the sampling config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Region of interest: `desk`, `full`, or six numbers.
    #[arg(long, value_parser = parse_roi, default_value = "desk")]
    roi: RoiBox,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene JSONs; round-robin batched in the given order.
    #[arg(long, required = true, num_args = 1..)]
    scenes: Vec<PathBuf>,
    /// Model config JSON (ModelConfig schema); desk-scale defaults.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training config JSON (TrainConfig schema).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoints and loss.csv land here [default: $BEVOCC_OUT_DIR/train].
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum RenderCmd {
    /// Render the field into a point cloud along the scene's scan pattern.
    Rays(RenderRaysArgs),
    /// Binarize the field onto a voxel grid (VOXG).
    Voxels(RenderVoxelsArgs),
}

#[derive(Args)]
struct RenderRaysArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Ray-march config JSON (RayRenderConfig schema).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Camera indices to zero out before encoding, e.g. `--drop-cameras 0,2`.
    #[arg(long, value_delimiter = ',')]
    drop_cameras: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderVoxelsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Voxel sampling config JSON (VoxelRenderConfig schema).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the voxel config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Voxel edge length in meters: one number or `x,y,z`.
    #[arg(long, value_parser = parse_voxel_size, default_value = "0.5")]
    voxel_size: VoxelSize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Depth AbsRel and Chamfer distance along ground-truth LiDAR rays.
    Pointmap(EvalPointmapArgs),
    /// IoU/F1 on binarized occupancy within the camera-visible region.
    Occupancy(EvalOccupancyArgs),
}

#[derive(Args)]
struct EvalPointmapArgs {
    /// Trained field to evaluate.
    #[arg(long, required_unless_present = "cloud", conflicts_with = "cloud")]
    checkpoint: Option<PathBuf>,
    /// Pre-rendered point cloud (LPCD) to score instead (Chamfer only).
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long)]
    scene: PathBuf,
    /// Ray-march config JSON (RayRenderConfig schema).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalOccupancyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Voxel sampling config JSON (VoxelRenderConfig schema).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_voxel_size, default_value = "0.5")]
    voxel_size: VoxelSize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    /// Score table CSV: header row, orientation row, one row per method.
    #[arg(long)]
    table: PathBuf,
    /// Ranked output CSV (per-column ranks + average, best first).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AttnCmd {
    /// Dump projector attention maps and per-cell dominant-camera grids.
    Dump(AttnDumpArgs),
}

#[derive(Args)]
struct AttnDumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AblateCmd {
    /// Train all three query-sampling strategies under one config.
    Sampling(AblateSamplingArgs),
}

#[derive(Args)]
struct AblateSamplingArgs {
    /// Scenes to train on.
    #[arg(long, required = true, num_args = 1..)]
    scenes: Vec<PathBuf>,
    /// Scene to evaluate on [default: the first training scene].
    #[arg(long)]
    eval_scene: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training config JSON; the strategy field is overridden per leg.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_voxel_size, default_value = "0.5")]
    voxel_size: VoxelSize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Scene(SceneCmd::Gen(_)) => "scene gen",
            Command::Lidar(LidarCmd::Sim(_)) => "lidar sim",
            Command::Labels(LabelsCmd::Make(_)) => "labels make",
            Command::Train(_) => "train",
            Command::Render(RenderCmd::Rays(_)) => "render rays",
            Command::Render(RenderCmd::Voxels(_)) => "render voxels",
            Command::Eval(EvalCmd::Pointmap(_)) => "eval pointmap",
            Command::Eval(EvalCmd::Occupancy(_)) => "eval occupancy",
            Command::Rank(_) => "rank",
            Command::Attn(AttnCmd::Dump(_)) => "attn dump",
            Command::Ablate(AblateCmd::Sampling(_)) => "ablate sampling",
        }
    }
}

// ── Command implementations ─────────────────────────────────────────

fn cmd_scene_gen(args: &SceneGenArgs, draft: &mut Draft) -> CmdResult {
    let cfg: GeneratorConfig = load_json_or_default(&args.config, "generator config")?;
    if let Some(p) = &args.config {
        draft.input(p);
    }
    let out = resolve_out(&args.out, "scene.json")?;
    draft.seed = Some(args.seed);
    draft.config = serde_json::json!({ "generator": cfg, "seed": args.seed });
    draft.manifest_path = Some(prepare_out_file(&out)?);

    let scene = draft.time("generate", || generate_scene(args.seed, &cfg).map_err(rt))?;
    scene.validate(&cfg.roi).map_err(rt)?;
    scene.save(&out).map_err(rt)?;
    draft.output(&out);
    println!(
        "scene seed {} with {} primitives, {} cameras -> {}",
        args.seed,
        scene.primitives.len(),
        scene.cameras.len(),
        out.display()
    );
    Ok(())
}

fn cmd_lidar_sim(args: &LidarSimArgs, draft: &mut Draft) -> CmdResult {
    let scene = load_scene(&args.scene)?;
    draft.input(&args.scene);
    let out = resolve_out(&args.out, "cloud.lpcd")?;
    draft.config = serde_json::json!({ "scene": args.scene.display().to_string() });
    draft.manifest_path = Some(prepare_out_file(&out)?);

    let cloud = draft.time("simulate", || simulate_lidar(&scene).map_err(rt))?;
    cloud.save(&out).map_err(rt)?;
    draft.output(&out);
    let fired = scan_rays(&scene.lidar).len();
    println!("{} returns from {} rays -> {}", cloud.len(), fired, out.display());
    Ok(())
}

fn cmd_labels_make(args: &LabelsMakeArgs, draft: &mut Draft) -> CmdResult {
    let mut cfg: SamplingConfig = load_json_or_default(&args.config, "sampling config")?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(bad)?;
    let scene = load_scene(&args.scene)?;
    draft.input(&args.scene);
    if let Some(p) = &args.config {
        draft.input(p);
    }
    let out = resolve_out(&args.out, "labels.lqry")?;
    draft.seed = Some(cfg.seed);
    draft.config = serde_json::json!({ "sampling": cfg, "roi": args.roi });
    draft.manifest_path = Some(prepare_out_file(&out)?);

    let cloud = draft.time("simulate", || simulate_lidar(&scene).map_err(rt))?;
    let outcome =
        draft.time("sample", || queries_from_cloud(&cloud, &cfg, &args.roi).map_err(rt))?;
    outcome.queries.save(&out).map_err(rt)?;
    draft.output(&out);
    println!(
        "{} queries ({} skipped symmetric rays, {} out-of-region draws) -> {}",
        outcome.queries.len(),
        outcome.skipped_symmetric_rays,
        outcome.discarded_out_of_roi,
        out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs, draft: &mut Draft) -> CmdResult {
    let model_cfg: ModelConfig = load_json_or_default(&args.model, "model config")?;
    let mut cfg: TrainConfig = load_json_or_default(&args.config, "training config")?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    model_cfg.validate().map_err(bad)?;
    cfg.validate().map_err(bad)?;
    let scenes: Vec<SceneSpec> =
        args.scenes.iter().map(|p| load_scene(p)).collect::<Result<_, _>>()?;
    for p in &args.scenes {
        draft.input(p);
    }
    let out_dir = resolve_out(&args.out_dir, "train")?;
    draft.seed = Some(cfg.seed);
    draft.config = serde_json::json!({ "train": cfg, "model": model_cfg });
    draft.manifest_path = Some(prepare_out_dir(&out_dir)?);

    let artifacts = draft.time("train", || train(&scenes, &model_cfg, &cfg, &out_dir).map_err(rt))?;
    draft.output(&artifacts.final_checkpoint);
    draft.output(&artifacts.loss_csv);
    let last = artifacts.history.last().expect("non-empty history");
    println!(
        "trained {} steps on {} scene(s); final loss {:.6} -> {}",
        artifacts.history.len(),
        scenes.len(),
        last.loss,
        artifacts.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_render_rays(args: &RenderRaysArgs, draft: &mut Draft) -> CmdResult {
    let render_cfg: RayRenderConfig = load_json_or_default(&args.config, "render config")?;
    render_cfg.validate().map_err(bad)?;
    let scene = load_scene(&args.scene)?;
    draft.input(&args.scene);
    let out = resolve_out(&args.out, "pred.lpcd")?;
    draft.config = serde_json::json!({ "render": render_cfg, "drop_cameras": args.drop_cameras });
    draft.manifest_path = Some(prepare_out_file(&out)?);

    draft.input(&args.checkpoint);
    let (model_cfg, store) = load_checkpoint(&args.checkpoint)
        .map_err(|e| Failure::Validation(format!("checkpoint {}: {e}", args.checkpoint.display())))?;
    let mut views = draft.time("render_views", || Ok(render_views(&scene)))?;
    if !args.drop_cameras.is_empty() {
        let keep: Vec<usize> =
            (0..views.cameras.len()).filter(|i| !args.drop_cameras.contains(i)).collect();
        views = drop_cameras(&views, &keep).map_err(bad)?;
    }
    let handle = draft
        .time("encode", || OccupancyFieldHandle::freeze(&model_cfg, &store, &views).map_err(rt))?;

    let rays = scan_rays(&scene.lidar);
    let (cloud, report) = draft.time("render", || {
        render_point_cloud(&rays, &handle, &render_cfg, &model_cfg.roi).map_err(rt)
    })?;
    cloud.save(&out).map_err(rt)?;
    draft.output(&out);
    println!(
        "{} points ({} below the weight floor, {} missed the region) -> {}",
        report.emitted,
        report.dropped_low_weight,
        report.missed_roi,
        out.display()
    );
    Ok(())
}

fn cmd_render_voxels(args: &RenderVoxelsArgs, draft: &mut Draft) -> CmdResult {
    let mut cfg: VoxelRenderConfig = load_json_or_default(&args.config, "voxel config")?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(bad)?;
    let scene = load_scene(&args.scene)?;
    draft.input(&args.scene);
    let out = resolve_out(&args.out, "grid.voxg")?;
    draft.seed = Some(cfg.seed);
    draft.config = serde_json::json!({ "voxel_render": cfg, "voxel_size": args.voxel_size.0 });
    draft.manifest_path = Some(prepare_out_file(&out)?);

    let (model_cfg, handle) = freeze_field(&args.checkpoint, &scene, draft)?;
    let grid = draft.time("binarize", || {
        render_voxel_grid(&handle, &model_cfg.roi, args.voxel_size.0, &cfg).map_err(rt)
    })?;
    grid.save(&out).map_err(rt)?;
    draft.output(&out);
    let occupied = grid.occupancy.iter().filter(|&&o| o).count();
    println!(
        "{}x{}x{} grid, {} of {} voxels occupied -> {}",
        grid.dims[0],
        grid.dims[1],
        grid.dims[2],
        occupied,
        grid.num_voxels(),
        out.display()
    );
    Ok(())
}

fn cmd_eval_pointmap(args: &EvalPointmapArgs, draft: &mut Draft) -> CmdResult {
    let render_cfg: RayRenderConfig = load_json_or_default(&args.config, "render config")?;
    render_cfg.validate().map_err(bad)?;
    let scene = load_scene(&args.scene)?;
    draft.input(&args.scene);
    let out = resolve_out(&args.out, "pointmap_report.json")?;
    draft.manifest_path = Some(prepare_out_file(&out)?);

    let report = match (&args.checkpoint, &args.cloud) {
        (Some(checkpoint), None) => {
            draft.config = serde_json::json!({ "render": render_cfg, "mode": "field" });
            let (model_cfg, handle) = freeze_field(checkpoint, &scene, draft)?;
            let rays = draft.time("simulate", || {
                simulate_lidar(&scene).map_err(rt)?.to_rays().map_err(rt)
            })?;
            draft.time("score", || {
                eval_pointmap(&handle, &scene, &rays, &render_cfg, &model_cfg.roi).map_err(rt)
            })?
        }
        (None, Some(cloud_path)) => {
            draft.config = serde_json::json!({ "mode": "cloud" });
            draft.input(cloud_path);
            let pred = PointCloud::load(cloud_path)
                .map_err(|e| Failure::Validation(format!("cloud {}: {e}", cloud_path.display())))?;
            let gt = draft.time("simulate", || simulate_lidar(&scene).map_err(rt))?;
            draft.time("score", || eval_cloud(&pred, &gt).map_err(rt))?
        }
        _ => unreachable!("clap enforces exactly one of --checkpoint/--cloud"),
    };
    report.save(&out).map_err(rt)?;
    draft.output(&out);
    let shown: Vec<String> =
        report.metrics.iter().map(|(k, v)| format!("{k} {v:.6}")).collect();
    println!("{} -> {}", shown.join(", "), out.display());
    Ok(())
}

fn cmd_eval_occupancy(args: &EvalOccupancyArgs, draft: &mut Draft) -> CmdResult {
    let cfg: VoxelRenderConfig = load_json_or_default(&args.config, "voxel config")?;
    cfg.validate().map_err(bad)?;
    let scene = load_scene(&args.scene)?;
    draft.input(&args.scene);
    let out = resolve_out(&args.out, "occupancy_report.json")?;
    draft.config = serde_json::json!({ "voxel_render": cfg, "voxel_size": args.voxel_size.0 });
    draft.manifest_path = Some(prepare_out_file(&out)?);

    let (model_cfg, handle) = freeze_field(&args.checkpoint, &scene, draft)?;
    let pred = draft.time("binarize_pred", || {
        render_voxel_grid(&handle, &model_cfg.roi, args.voxel_size.0, &cfg).map_err(rt)
    })?;
    let mut gt = draft.time("binarize_gt", || {
        render_voxel_grid(&IndicatorField(&scene), &model_cfg.roi, args.voxel_size.0, &cfg)
            .map_err(rt)
    })?;
    gt.visibility =
        Some(draft.time("visibility", || visibility_mask(&scene, &gt).map_err(rt))?);
    let scores = occupancy_scores(&pred, &gt).map_err(rt)?;

    let report = MetricReport {
        metrics: BTreeMap::from([("iou".into(), scores.iou), ("f1".into(), scores.f1)]),
        support: BTreeMap::from([
            ("iou".into(), scores.visible as u64),
            ("f1".into(), scores.visible as u64),
        ]),
        notes: BTreeMap::from([
            ("true_pos".into(), scores.true_pos as u64),
            ("false_pos".into(), scores.false_pos as u64),
            ("false_neg".into(), scores.false_neg as u64),
            ("visible_voxels".into(), scores.visible as u64),
            ("total_voxels".into(), pred.num_voxels() as u64),
        ]),
        config: draft.config.clone(),
    };
    report.save(&out).map_err(rt)?;
    draft.output(&out);
    println!(
        "iou {:.4}, f1 {:.4} over {} visible voxels -> {}",
        scores.iou,
        scores.f1,
        scores.visible,
        out.display()
    );
    Ok(())
}

fn cmd_rank(args: &RankArgs, draft: &mut Draft) -> CmdResult {
    let table = RankTable::load(&args.table).map_err(bad)?;
    draft.input(&args.table);
    let out = resolve_out(&args.out, "ranks.csv")?;
    draft.config = serde_json::json!({ "table": args.table.display().to_string() });
    draft.manifest_path = Some(prepare_out_file(&out)?);

    let ranks = column_ranks(&table).map_err(bad)?;
    let averages = average_rank(&table).map_err(bad)?;
    let mut order: Vec<usize> = (0..table.methods.len()).collect();
    order.sort_by(|&a, &b| averages[a].total_cmp(&averages[b]).then(a.cmp(&b)));

    let mut csv = String::from("method");
    for c in &table.columns {
        csv.push(',');
        csv.push_str(c);
    }
    csv.push_str(",average_rank\n");
    for &m in &order {
        csv.push_str(&table.methods[m]);
        for r in &ranks[m] {
            csv.push_str(&format!(",{r}"));
        }
        csv.push_str(&format!(",{}\n", averages[m]));
    }
    std::fs::write(&out, csv).map_err(rt)?;
    draft.output(&out);
    let best = order[0];
    println!(
        "best method: {} (average rank {}) -> {}",
        table.methods[best],
        averages[best],
        out.display()
    );
    Ok(())
}

/// One attention map as CSV: comment header naming the shape and each
/// camera's key-token range, then the row-stochastic weight matrix.
fn attention_csv(rec: &AttentionRecord) -> String {
    let mut out = format!(
        "# {}: {} query rows x {} key tokens, {} tokens per camera\n",
        rec.name, rec.rows, rec.cols, rec.tokens_per_camera
    );
    out.push('#');
    for c in 0..rec.cameras() {
        out.push_str(&format!(
            " cam{c} tokens [{},{});",
            c * rec.tokens_per_camera,
            (c + 1) * rec.tokens_per_camera
        ));
    }
    out.push('\n');
    for r in 0..rec.rows {
        let row: Vec<String> = rec.row(r).iter().map(|w| w.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Dominant camera per query cell, as a `side x side` integer grid
/// (row = cell y, column = cell x).
fn argmax_csv(rec: &AttentionRecord, side: usize) -> String {
    let dominant = rec.dominant_camera();
    let mut out = format!("# {}: dominant camera per cell; row = iy, col = ix\n", rec.name);
    for iy in 0..side {
        let row: Vec<String> =
            (0..side).map(|ix| dominant[iy * side + ix].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn cmd_attn_dump(args: &AttnDumpArgs, draft: &mut Draft) -> CmdResult {
    let scene = load_scene(&args.scene)?;
    draft.input(&args.scene);
    draft.input(&args.checkpoint);
    let out_dir = resolve_out(&args.out_dir, "attn")?;
    draft.config = serde_json::json!({ "checkpoint": args.checkpoint.display().to_string() });
    draft.manifest_path = Some(prepare_out_dir(&out_dir)?);

    let (cfg, store) = load_checkpoint(&args.checkpoint)
        .map_err(|e| Failure::Validation(format!("checkpoint {}: {e}", args.checkpoint.display())))?;
    let views = draft.time("render_views", || Ok(render_views(&scene)))?;
    let records =
        draft.time("attention", || attention_records(&cfg, &store, &views).map_err(rt))?;

    for rec in &records {
        let stem = rec.name.replace('.', "_");
        let weights_path = out_dir.join(format!("attn_{stem}.csv"));
        std::fs::write(&weights_path, attention_csv(rec)).map_err(rt)?;
        draft.output(&weights_path);
        // query rows form the BEV grid, so the argmax map only exists for
        // maps whose rows are the grid cells
        if rec.rows == cfg.query_side * cfg.query_side {
            let map_path = out_dir.join(format!("argmax_{stem}.csv"));
            std::fs::write(&map_path, argmax_csv(rec, cfg.query_side)).map_err(rt)?;
            draft.output(&map_path);
        }
    }
    println!("{} attention maps -> {}", records.len(), out_dir.display());
    Ok(())
}

/// A training config rewritten for one sampling strategy: non-symmetric
/// strategies must carry no symmetric share.
fn strategy_config(base: &TrainConfig, strategy: SamplingStrategy) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.sampling.strategy = strategy;
    if strategy != SamplingStrategy::StratifiedSymmetric {
        cfg.sampling.symmetric_share = 0;
    }
    cfg
}

fn strategy_slug(strategy: SamplingStrategy) -> &'static str {
    match strategy {
        SamplingStrategy::Random => "random",
        SamplingStrategy::Stratified => "stratified",
        SamplingStrategy::StratifiedSymmetric => "stratified_symmetric",
    }
}

fn cmd_ablate_sampling(args: &AblateSamplingArgs, draft: &mut Draft) -> CmdResult {
    let model_cfg: ModelConfig = load_json_or_default(&args.model, "model config")?;
    let mut base: TrainConfig = load_json_or_default(&args.config, "training config")?;
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    model_cfg.validate().map_err(bad)?;
    let strategies = [
        SamplingStrategy::Random,
        SamplingStrategy::Stratified,
        SamplingStrategy::StratifiedSymmetric,
    ];
    // all three legs must validate before any of them trains
    for &s in &strategies {
        strategy_config(&base, s).validate().map_err(|e| {
            Failure::Validation(format!("strategy {} under this config: {e}", strategy_slug(s)))
        })?;
    }
    let scenes: Vec<SceneSpec> =
        args.scenes.iter().map(|p| load_scene(p)).collect::<Result<_, _>>()?;
    for p in &args.scenes {
        draft.input(p);
    }
    let eval_scene = match &args.eval_scene {
        Some(p) => {
            draft.input(p);
            load_scene(p)?
        }
        None => scenes[0].clone(),
    };
    let out_dir = resolve_out(&args.out_dir, "ablation")?;
    draft.seed = Some(base.seed);
    draft.config = serde_json::json!({
        "train": base,
        "model": model_cfg,
        "voxel_size": args.voxel_size.0,
        "strategies": strategies.iter().map(|&s| strategy_slug(s)).collect::<Vec<_>>(),
    });
    draft.manifest_path = Some(prepare_out_dir(&out_dir)?);

    let render_cfg = RayRenderConfig::default();
    let vox_cfg = VoxelRenderConfig::default();
    let mut gt = render_voxel_grid(&IndicatorField(&eval_scene), &model_cfg.roi, args.voxel_size.0, &vox_cfg)
        .map_err(rt)?;
    gt.visibility = Some(visibility_mask(&eval_scene, &gt).map_err(rt)?);
    let eval_rays = simulate_lidar(&eval_scene).map_err(rt)?.to_rays().map_err(rt)?;
    let eval_views = render_views(&eval_scene);

    let mut csv = String::from("strategy,final_loss,absrel,chamfer_m,iou,f1\n");
    for &strategy in &strategies {
        let slug = strategy_slug(strategy);
        let leg_dir = out_dir.join(slug);
        let cfg = strategy_config(&base, strategy);
        let artifacts = draft.time(&format!("train_{slug}"), || {
            train(&scenes, &model_cfg, &cfg, &leg_dir).map_err(rt)
        })?;
        let (pointmap, scores) = draft.time(&format!("eval_{slug}"), || {
            let handle = OccupancyFieldHandle::freeze(&model_cfg, &artifacts.store, &eval_views)
                .map_err(rt)?;
            let pointmap =
                eval_pointmap(&handle, &eval_scene, &eval_rays, &render_cfg, &model_cfg.roi)
                    .map_err(rt)?;
            let pred = render_voxel_grid(&handle, &model_cfg.roi, args.voxel_size.0, &vox_cfg)
                .map_err(rt)?;
            Ok((pointmap, occupancy_scores(&pred, &gt).map_err(rt)?))
        })?;
        let final_loss = artifacts.history.last().expect("non-empty history").loss;
        csv.push_str(&format!(
            "{slug},{final_loss},{},{},{},{}\n",
            pointmap.metrics["absrel"], pointmap.metrics["chamfer_m"], scores.iou, scores.f1
        ));
        draft.output(&artifacts.final_checkpoint);
        println!(
            "{slug}: loss {final_loss:.6}, absrel {:.4}, chamfer {:.4}, iou {:.4}, f1 {:.4}",
            pointmap.metrics["absrel"], pointmap.metrics["chamfer_m"], scores.iou, scores.f1
        );
    }
    let csv_path = out_dir.join("ablation.csv");
    std::fs::write(&csv_path, csv).map_err(rt)?;
    draft.output(&csv_path);
    println!("comparison table -> {}", csv_path.display());
    Ok(())
}

// ── Entry point ─────────────────────────────────────────────────────

fn dispatch(command: &Command, draft: &mut Draft) -> CmdResult {
    match command {
        Command::Scene(SceneCmd::Gen(a)) => cmd_scene_gen(a, draft),
        Command::Lidar(LidarCmd::Sim(a)) => cmd_lidar_sim(a, draft),
        Command::Labels(LabelsCmd::Make(a)) => cmd_labels_make(a, draft),
        Command::Train(a) => cmd_train(a, draft),
        Command::Render(RenderCmd::Rays(a)) => cmd_render_rays(a, draft),
        Command::Render(RenderCmd::Voxels(a)) => cmd_render_voxels(a, draft),
        Command::Eval(EvalCmd::Pointmap(a)) => cmd_eval_pointmap(a, draft),
        Command::Eval(EvalCmd::Occupancy(a)) => cmd_eval_occupancy(a, draft),
        Command::Rank(a) => cmd_rank(a, draft),
        Command::Attn(AttnCmd::Dump(a)) => cmd_attn_dump(a, draft),
        Command::Ablate(AblateCmd::Sampling(a)) => cmd_ablate_sampling(a, draft),
    }
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap usage problems are validation errors; --help/--version
            // are successes
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("warning: worker pool already started; --threads ignored");
        }
    }
    let mut draft = Draft::new(cli.command.name());
    match dispatch(&cli.command, &mut draft) {
        Ok(()) => {
            if let Err(e) = draft.write() {
                eprintln!("error: manifest: {e}");
                return 2;
            }
            0
        }
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            draft.status = format!("failed: {msg}");
            if let Err(e) = draft.write() {
                eprintln!("error: manifest: {e}");
            }
            2
        }
    }
}

fn main() {
    std::process::exit(run());
}
