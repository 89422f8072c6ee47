//! End-to-end checks of the `bevocc` binary: every subcommand runs against
//! a tiny scene/model, manifests appear where promised, reruns are
//! byte-identical, and the exit-code contract (0 ok / 1 validation /
//! 2 runtime) holds.

use std::path::{Path, PathBuf};
use std::process::Command;

use bevocc_core::model::ModelConfig;
use bevocc_core::simulator::GeneratorConfig;
use bevocc_core::supervision::{SamplingConfig, SamplingStrategy};
use bevocc_core::training::TrainConfig;

fn bevocc() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bevocc"));
    // isolate tests from the ambient default-output directory
    cmd.env_remove("BEVOCC_OUT_DIR");
    cmd
}

/// Run to completion, demand the given exit code, return (stdout, stderr).
fn run_expect(mut cmd: Command, code: i32) -> (String, String) {
    let out = cmd.output().expect("spawn bevocc");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(
        out.status.code(),
        Some(code),
        "expected exit {code}\nstdout:\n{stdout}\nstderr:\n{stderr}"
    );
    (stdout, stderr)
}

fn run_ok(args: &[&str]) -> String {
    let mut cmd = bevocc();
    cmd.args(args);
    run_expect(cmd, 0).0
}

fn run_fail(args: &[&str], code: i32) -> String {
    let mut cmd = bevocc();
    cmd.args(args);
    run_expect(cmd, code).1
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

/// Two low-res cameras keep rendering and encoding cheap.
fn tiny_gen_config() -> GeneratorConfig {
    GeneratorConfig {
        cameras: 2,
        image_height: 16,
        image_width: 16,
        focal_px: 8.0,
        ..GeneratorConfig::default()
    }
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        iterations: 6,
        warmup_iterations: 2,
        peak_lr: 1e-3,
        scenes_per_step: 1,
        queries_per_scene: 64,
        checkpoint_every: 100,
        seed: 0,
        sampling: SamplingConfig {
            strategy: SamplingStrategy::StratifiedSymmetric,
            free_bins: 5,
            surface_tau_m: 0.1,
            positives: 32,
            negatives: 32,
            symmetric_share: 2,
            seed: 0,
        },
    }
}

/// Generate the shared tiny scene plus config files into `dir`; returns
/// (scene, model config, train config) paths.
fn seed_workspace(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let gen = dir.join("gen.json");
    let model = dir.join("model.json");
    let train = dir.join("train.json");
    let scene = dir.join("scene.json");
    write_json(&gen, &tiny_gen_config());
    write_json(&model, &ModelConfig::tiny_for_tests());
    write_json(&train, &tiny_train_config());
    run_ok(&["scene", "gen", "--seed", "5", "--config", gen.to_str().unwrap(), "--out", scene.to_str().unwrap()]);
    (scene, model, train)
}

fn manifest(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("manifest {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

#[test]
fn scene_gen_is_deterministic_and_manifested() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen.json");
    write_json(&gen, &tiny_gen_config());
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for out in [&a, &b] {
        run_ok(&["scene", "gen", "--seed", "11", "--config", gen.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), "same seed, same bytes");

    let m = manifest(&dir.path().join("a.json.manifest.json"));
    assert_eq!(m["tool"], "bevocc");
    assert_eq!(m["command"], "scene gen");
    assert_eq!(m["seed"], 11);
    assert_eq!(m["status"], "ok");
    let sha = m["config_sha256"].as_str().unwrap();
    assert_eq!(sha.len(), 64);
    assert!(sha.chars().all(|c| c.is_ascii_hexdigit()));
    let mb = manifest(&dir.path().join("b.json.manifest.json"));
    assert_eq!(mb["config_sha256"], m["config_sha256"], "equal configs hash equal");
    assert!(!m["timings_s"].as_array().unwrap().is_empty());
    assert_eq!(m["outputs"][0], a.display().to_string());
}

#[test]
fn the_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, model, train) = seed_workspace(dir.path());
    let scene = scene.to_str().unwrap();

    // LiDAR sweep; reruns are byte-identical
    let cloud = dir.path().join("cloud.lpcd");
    let stdout = run_ok(&["lidar", "sim", "--scene", scene, "--out", cloud.to_str().unwrap()]);
    assert!(stdout.contains("2880 rays"), "2 cams fire the full sweep: {stdout}");
    let first = std::fs::read(&cloud).unwrap();
    run_ok(&["lidar", "sim", "--scene", scene, "--out", cloud.to_str().unwrap()]);
    assert_eq!(first, std::fs::read(&cloud).unwrap());

    // labels
    let labels = dir.path().join("labels.lqry");
    let samp = dir.path().join("samp.json");
    write_json(&samp, &tiny_train_config().sampling);
    let stdout = run_ok(&["labels", "make", "--scene", scene, "--config", samp.to_str().unwrap(), "--out", labels.to_str().unwrap()]);
    assert!(stdout.contains("64 queries"), "32 positives + 32 negatives: {stdout}");
    assert!(labels.exists());

    // train
    let train_dir = dir.path().join("train");
    run_ok(&["train", "--scenes", scene, "--model", model.to_str().unwrap(), "--config", train.to_str().unwrap(), "--out-dir", train_dir.to_str().unwrap()]);
    let ckpt = train_dir.join("checkpoint_final.vgtc");
    assert!(ckpt.exists());
    let loss_csv = std::fs::read_to_string(train_dir.join("loss.csv")).unwrap();
    assert!(loss_csv.starts_with("step,loss,lr,grad_norm"));
    assert_eq!(loss_csv.lines().count(), 7, "header + six steps");
    let m = manifest(&train_dir.join("manifest.json"));
    assert_eq!(m["status"], "ok");
    assert_eq!(m["command"], "train");
    let ckpt = ckpt.to_str().unwrap();

    // render rays, with and without a dropped camera
    let pred = dir.path().join("pred.lpcd");
    run_ok(&["render", "rays", "--checkpoint", ckpt, "--scene", scene, "--out", pred.to_str().unwrap()]);
    assert!(pred.exists());
    run_ok(&["render", "rays", "--checkpoint", ckpt, "--scene", scene, "--drop-cameras", "1", "--out", dir.path().join("pred_drop.lpcd").to_str().unwrap()]);

    // render voxels
    let grid = dir.path().join("grid.voxg");
    let stdout = run_ok(&["render", "voxels", "--checkpoint", ckpt, "--scene", scene, "--voxel-size", "2", "--out", grid.to_str().unwrap()]);
    assert!(stdout.contains("8x8x2 grid"), "16x16x4 m region at 2 m voxels: {stdout}");
    assert!(grid.exists());

    // eval pointmap against the field
    let report_path = dir.path().join("pointmap.json");
    run_ok(&["eval", "pointmap", "--checkpoint", ckpt, "--scene", scene, "--out", report_path.to_str().unwrap()]);
    let report = manifest(&report_path);
    let absrel = report["metrics"]["absrel"].as_f64().unwrap();
    let chamfer = report["metrics"]["chamfer_m"].as_f64().unwrap();
    assert!(absrel.is_finite() && absrel >= 0.0);
    assert!(chamfer.is_finite() && chamfer >= 0.0);
    assert!(report["support"]["absrel"].as_u64().unwrap() > 0);

    // eval occupancy
    let occ_path = dir.path().join("occupancy.json");
    run_ok(&["eval", "occupancy", "--checkpoint", ckpt, "--scene", scene, "--voxel-size", "2", "--out", occ_path.to_str().unwrap()]);
    let occ = manifest(&occ_path);
    let iou = occ["metrics"]["iou"].as_f64().unwrap();
    let f1 = occ["metrics"]["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&iou));
    assert!((0.0..=1.0).contains(&f1));
    assert!(iou <= f1 + 1e-12);
    assert!(occ["notes"]["visible_voxels"].as_u64().unwrap() > 0);

    // attention dump: weight CSV + dominant-camera map per tapped block
    let attn_dir = dir.path().join("attn");
    run_ok(&["attn", "dump", "--checkpoint", ckpt, "--scene", scene, "--out-dir", attn_dir.to_str().unwrap()]);
    let names: Vec<String> = std::fs::read_dir(&attn_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(names.iter().any(|n| n.starts_with("attn_") && n.ends_with(".csv")), "{names:?}");
    assert!(names.iter().any(|n| n.starts_with("argmax_")), "{names:?}");
    let map = names.iter().find(|n| n.starts_with("argmax_")).unwrap();
    let body = std::fs::read_to_string(attn_dir.join(map)).unwrap();
    let grid_rows: Vec<&str> = body.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(grid_rows.len(), 4, "4x4 query grid");
    for row in grid_rows {
        for cell in row.split(',') {
            let cam: usize = cell.parse().unwrap();
            assert!(cam < 2, "dominant camera index in range");
        }
    }
}

#[test]
fn rank_reproduces_the_bundled_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let table = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/pointmap_benchmark.csv");
    let out = dir.path().join("ranks.csv");
    let stdout = run_ok(&["rank", "--table", table.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("best method: bevocc (average rank 1.8)"), "{stdout}");

    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("method,"));
    assert!(header.ends_with(",average_rank"));
    let best = lines.next().unwrap();
    assert!(best.starts_with("bevocc,"), "{best}");
    assert!(best.ends_with(",1.8"), "{best}");
    assert_eq!(csv.lines().count(), 10, "header + nine methods");
}

#[test]
fn cloud_self_comparison_scores_zero_chamfer() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, _, _) = seed_workspace(dir.path());
    let scene = scene.to_str().unwrap();
    let cloud = dir.path().join("cloud.lpcd");
    run_ok(&["lidar", "sim", "--scene", scene, "--out", cloud.to_str().unwrap()]);

    let report_path = dir.path().join("report.json");
    run_ok(&["eval", "pointmap", "--cloud", cloud.to_str().unwrap(), "--scene", scene, "--out", report_path.to_str().unwrap()]);
    let report = manifest(&report_path);
    // LPCD stores coordinates as f32, so the self-distance is the
    // quantization noise of one file round-trip, not exactly zero
    let chamfer = report["metrics"]["chamfer_m"].as_f64().unwrap();
    assert!(chamfer < 1e-5, "self-comparison within storage precision, got {chamfer}");
    assert!(report["metrics"].get("absrel").is_none(), "clouds carry no per-ray depths");
}

#[test]
fn omitted_out_flags_fall_back_to_the_env_dir() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, _, _) = seed_workspace(dir.path());
    let mut cmd = bevocc();
    cmd.args(["lidar", "sim", "--scene", scene.to_str().unwrap()]);
    cmd.env("BEVOCC_OUT_DIR", dir.path());
    run_expect(cmd, 0);
    assert!(dir.path().join("cloud.lpcd").exists());
    assert!(dir.path().join("cloud.lpcd.manifest.json").exists());
}

#[test]
fn config_mistakes_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, model, _) = seed_workspace(dir.path());

    // unknown config keys are rejected by name
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"iterationz": 5}"#).unwrap();
    let stderr = run_fail(
        &["train", "--scenes", scene.to_str().unwrap(), "--model", model.to_str().unwrap(), "--config", bad.to_str().unwrap(), "--out-dir", dir.path().join("t").to_str().unwrap()],
        1,
    );
    assert!(stderr.contains("iterationz"), "{stderr}");
    assert!(!dir.path().join("t").join("manifest.json").exists(), "validation failures leave no manifest");

    // no --out and no default directory
    let stderr = run_fail(&["lidar", "sim", "--scene", scene.to_str().unwrap()], 1);
    assert!(stderr.contains("BEVOCC_OUT_DIR"), "{stderr}");

    // malformed flag values and unknown subcommands are validation errors too
    run_fail(&["rank", "--table"], 1);
    run_fail(&["nonsense"], 1);
    let stderr = run_fail(
        &["render", "voxels", "--checkpoint", "x", "--scene", scene.to_str().unwrap(), "--voxel-size", "0", "--out", dir.path().join("g.voxg").to_str().unwrap()],
        1,
    );
    assert!(stderr.contains("voxel size"), "{stderr}");
}

#[test]
fn divergence_exits_two_and_still_writes_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, model, _) = seed_workspace(dir.path());
    let mut cfg = tiny_train_config();
    cfg.iterations = 8;
    cfg.warmup_iterations = 1;
    cfg.peak_lr = 1e15;
    let cfg_path = dir.path().join("explode.json");
    write_json(&cfg_path, &cfg);

    let out_dir = dir.path().join("boom");
    let stderr = run_fail(
        &["train", "--scenes", scene.to_str().unwrap(), "--model", model.to_str().unwrap(), "--config", cfg_path.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()],
        2,
    );
    assert!(stderr.contains("diverged"), "{stderr}");
    let m = manifest(&out_dir.join("manifest.json"));
    let status = m["status"].as_str().unwrap();
    assert!(status.starts_with("failed:"), "{status}");
    assert!(status.contains("diverged"), "{status}");
}
