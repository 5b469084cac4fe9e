use std::path::Path;
use std::process::{Command, Output};

use layered_radiance::field::{Aabb, ClassSet, VoxelField};
use layered_radiance::geometry::{Camera, Vec3};
use layered_radiance::io::{save_checkpoint, TrainedField};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_layered-radiance"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn vacuum_checkpoint(path: &Path) {
    let classes = ClassSet::new(vec!["background".into(), "thing".into()], 0).unwrap();
    let mut field = VoxelField::new([4, 4, 4], Aabb::cube(2.0), classes).unwrap();
    let c = field.grid().channels();
    let m = field.m();
    for vertex in field.params_mut().chunks_exact_mut(c) {
        vertex[..m].fill(-1000.0);
    }
    save_checkpoint(path, &TrainedField::Layered(field), &serde_json::json!({})).unwrap();
}

fn write_cameras(path: &Path) {
    let cams: Vec<Camera> = (0..2)
        .map(|k| {
            Camera::look_at(Vec3::new(0.5 * k as f64, -4.0, 0.5), Vec3::zeros(), Vec3::z(), 10, 8, 9.0, 0.1, 8.0).unwrap()
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&cams).unwrap()).unwrap();
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_exits_1() {
    let out = run(&["check-gradients", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cams = dir.path().join("cameras.json");
    write_cameras(&cams);
    let cam = format!("{}#0", s(&cams));
    let out = run(&["render", "--checkpoint", "/nonexistent.ckpt", "--camera", &cam, "--out", "x.png"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}

#[test]
fn vacuum_renders_black() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("vacuum.ckpt");
    let cams = dir.path().join("cameras.json");
    vacuum_checkpoint(&ckpt);
    write_cameras(&cams);
    let png = dir.path().join("x.png");
    let cam = format!("{}#0", s(&cams));
    let out = run(&["render", "--checkpoint", s(&ckpt), "--camera", &cam, "--out", s(&png)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = image::open(&png).unwrap().to_rgb8();
    assert_eq!((img.width(), img.height()), (10, 8));
    assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));
}

#[test]
fn bad_camera_index_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("vacuum.ckpt");
    let cams = dir.path().join("cameras.json");
    vacuum_checkpoint(&ckpt);
    write_cameras(&cams);
    let cam = format!("{}#7", s(&cams));
    let out = run(&["render", "--checkpoint", s(&ckpt), "--camera", &cam, "--out", "x.png"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn check_gradients_passes() {
    let out = run(&["check-gradients", "--seed", "7", "--instances", "20"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
}

/// Generates a tiny scene, trains briefly and drives every downstream subcommand.
#[test]
fn full_pipeline_on_a_tiny_scene() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut spec: serde_json::Value =
        serde_json::from_str(layered_radiance::cli::BUNDLED_SCENE).unwrap();
    spec["image"] = serde_json::json!({"width": 16, "height": 16});
    spec["rig"]["count"] = 4.into();
    spec["render_steps"] = 256.into();
    let spec_path = root.join("scene.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let data = root.join("data");
    let out = run(&["generate-scene", "--spec", s(&spec_path), "--out", s(&data), "--noise-rate", "0.2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg_path = root.join("cfg.json");
    std::fs::write(&cfg_path, r#"{"iterations": 500, "rays_per_batch": 64, "samples_per_ray": 16}"#).unwrap();
    let train = root.join("train");
    let out = run(&[
        "train", "--scene", s(&data), "--out", s(&train), "--config", s(&cfg_path), "--iters", "3", "--resolution", "8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // Flags override the file, which overrides defaults.
    let logged: serde_json::Value = serde_json::from_slice(&std::fs::read(train.join("config.json")).unwrap()).unwrap();
    assert_eq!(logged["iterations"], 3);
    assert_eq!(logged["rays_per_batch"], 64);
    assert_eq!(logged["resolution"], serde_json::json!([8, 8, 8]));
    assert_eq!(logged["learning_rate"], 0.01);
    let log = std::fs::read_to_string(train.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let ckpt = train.join("field.ckpt");
    let cam = format!("{}#1", s(&data.join("cameras.json")));
    let layers = root.join("layers");
    let out = run(&["render-layers", "--checkpoint", s(&ckpt), "--camera", &cam, "--out", s(&layers)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["color.png", "depth.png", "mask_red.png", "layer_red.png", "mask_background.png", "layer_blue.png"] {
        assert!(layers.join(f).exists(), "{f} missing");
    }

    let edit = root.join("edit.json");
    std::fs::write(&edit, r#"{"red": {"remove": true}, "blue": {"transform": {"translation": [0, 0, 1]}}}"#).unwrap();
    let frames = root.join("frames");
    let dolly = format!("dolly:{cam}:6:2:3");
    let out = run(&["edit", "--checkpoint", s(&ckpt), "--edit", s(&edit), "--cameras", &dolly, "--out", s(&frames)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for k in 0..3 {
        assert!(frames.join(format!("frame_{k:04}.png")).exists());
    }

    let bad_edit = root.join("bad.json");
    std::fs::write(&bad_edit, r#"{"green": {"remove": true}}"#).unwrap();
    let out = run(&["edit", "--checkpoint", s(&ckpt), "--edit", s(&bad_edit), "--cameras", &cam, "--out", s(&frames)]);
    assert_eq!(out.status.code(), Some(2));

    let report = root.join("report.json");
    let out = run(&["eval", "--checkpoint", s(&ckpt), "--scene", s(&data), "--split", "val", "--out", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["split"], "val");
    assert_eq!(r["view_count"], 1);
}
