//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::editing::{dolly_zoom_path, render_edited, EditSpec, ResolvedEdit};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::gradcheck::run_gradient_checks;
use crate::io::{load_checkpoint, load_dataset, read_file, read_json, write_json, CheckpointHeader, TrainedField};
use crate::metrics::evaluate;
use crate::render::{render, render_layer, DEFAULT_SAMPLES_PER_RAY};
use crate::scenegen::{build_scene, emit_dataset, SceneSpec};
use crate::trainer::{train, TrainConfig, TrainMode, TrainOutputs};

/// The scene shipped with the crate, used when `generate-scene` gets no spec.
pub const BUNDLED_SCENE: &str = include_str!("../scenes/blobs3.json");

#[derive(Parser, Debug)]
#[command(name = "layered-radiance", version, about = "Train, render and edit radiance fields split into semantic layers")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene with the reference integrator and write a dataset.
    GenerateScene(GenerateArgs),
    /// Fit a field to a dataset.
    Train(TrainArgs),
    /// Render one camera of a checkpoint to a PNG.
    Render(RenderArgs),
    /// Render per-class layers, soft masks and depth of one camera.
    RenderLayers(RenderArgs),
    /// Render an edited checkpoint along a camera path as numbered frames.
    Edit(EditArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare every analytic gradient with finite differences.
    CheckGradients(GradArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Scene spec JSON; the bundled three-class blob scene if omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Share of class-boundary tiles that get a corrupted mask blob (training views only).
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    noise_seed: Option<u64>,
    /// Quadrature steps per ray.
    #[arg(long)]
    render_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with any subset of the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed-order gradient reduction, independent of the thread count.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    rays: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Grid vertices per axis.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_sem: Option<f64>,
    #[arg(long)]
    lambda_sparse: Option<f64>,
    #[arg(long)]
    lambda_group: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `cameras.json#<index>` (index defaults to 0).
    #[arg(long)]
    camera: String,
    /// Output PNG for `render`, output directory for `render-layers`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct EditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Edit spec JSON keyed by class name.
    #[arg(long)]
    edit: PathBuf,
    /// A cameras.json file (every camera is a frame), `cameras.json#<index>`, or
    /// `dolly:<cameras.json#index>:<target distance>:<travel>:<frames>`.
    #[arg(long)]
    cameras: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Random instances per suite.
    #[arg(long, default_value_t = 200)]
    instances: usize,
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenerateScene(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Render(a) => render_cmd(a, false),
        Command::RenderLayers(a) => render_cmd(a, true),
        Command::Edit(a) => edit_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::CheckGradients(a) => return Ok(if grad_cmd(a) { 0 } else { 2 }),
    }
    .map(|()| 0)
}

fn log_config(what: &str, value: &impl serde::Serialize) {
    eprintln!("{what}: {}", serde_json::to_string(value).expect("config serializes"));
}

fn generate(a: GenerateArgs) -> Result<()> {
    let text = match &a.spec {
        Some(p) => String::from_utf8(read_file(p)?).map_err(|e| Error::format(p, e.to_string()))?,
        None => BUNDLED_SCENE.to_string(),
    };
    let mut spec = SceneSpec::from_json(&text)?;
    if let Some(r) = a.noise_rate {
        spec.mask_noise.outlier_rate = r;
    }
    if let Some(s) = a.noise_seed {
        spec.mask_noise.seed = s;
    }
    if let Some(n) = a.render_steps {
        spec.render_steps = n;
    }
    log_config("scene", &spec);
    let scene = build_scene(&spec)?;
    let report = emit_dataset(&scene, &a.out, &spec.mask_noise)?;
    eprintln!(
        "wrote {} views to {} ({} of {} boundary tiles corrupted)",
        report.views,
        a.out.display(),
        report.noise.flipped_tiles,
        report.noise.boundary_tiles
    );
    Ok(())
}

/// Defaults, then the config file, then flags.
fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.mode {
        cfg.mode = v;
    }
    if let Some(v) = a.iters {
        cfg.iterations = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.deterministic {
        cfg.deterministic = true;
    }
    if let Some(v) = a.rays {
        cfg.rays_per_batch = v;
    }
    if let Some(v) = a.samples {
        cfg.samples_per_ray = v;
    }
    if let Some(v) = a.resolution {
        cfg.resolution = [v; 3];
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.lambda_sem {
        cfg.loss.lambda_sem = v;
    }
    if let Some(v) = a.lambda_sparse {
        cfg.loss.lambda_sparse = v;
    }
    if let Some(v) = a.lambda_group {
        cfg.loss.lambda_group = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    log_config("train config", &cfg);
    let dataset = load_dataset(&a.scene)?;
    let cfg_json = serde_json::to_value(&cfg).expect("config serializes");
    write_json(&a.out.join("config.json"), &cfg)?;
    let every = (cfg.iterations / 20).max(1);
    train(&dataset, &cfg, Some(&a.out), &cfg_json, |r| {
        if r.step % every == 0 || r.step == cfg.iterations {
            eprintln!("step {:>6}  loss {:.5}  batch psnr {:.2} dB", r.step, r.total, r.psnr_batch);
        }
    })?;
    let out = TrainOutputs { dir: a.out.clone() };
    eprintln!("checkpoint: {}", out.final_checkpoint().display());
    Ok(())
}

/// Reads `path#index` (index 0 when absent). The file holds a camera list or one camera.
pub fn load_camera(reference: &str) -> Result<Camera> {
    let (path, index) = match reference.rsplit_once('#') {
        Some((p, i)) => (
            p,
            i.parse::<usize>()
                .map_err(|_| Error::invalid(format!("camera index {i:?} is not a number")))?,
        ),
        None => (reference, 0),
    };
    let cameras = load_cameras(Path::new(path))?;
    let cam = cameras
        .get(index)
        .cloned()
        .ok_or_else(|| Error::invalid(format!("{path} holds {} cameras, no index {index}", cameras.len())))?;
    cam.validate()?;
    Ok(cam)
}

fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let value: serde_json::Value = read_json(path)?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|c| vec![c])
    };
    parsed.map_err(|e| Error::format(path, e.to_string()))
}

/// Camera path from `--cameras`: a file, one camera of a file, or a dolly zoom.
pub fn parse_camera_path(spec: &str) -> Result<Vec<Camera>> {
    if let Some(rest) = spec.strip_prefix("dolly:") {
        let parts: Vec<&str> = rest.rsplitn(4, ':').collect();
        let [frames, travel, target, start] = parts[..] else {
            return Err(Error::invalid(
                "dolly syntax is dolly:<cameras.json#index>:<target distance>:<travel>:<frames>",
            ));
        };
        let num = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::invalid(format!("dolly {what} {s:?} is not a number")))
        };
        let frames = frames
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("dolly frame count {frames:?} is not an integer")))?;
        return dolly_zoom_path(&load_camera(start)?, num(target, "target distance")?, num(travel, "travel")?, frames);
    }
    if spec.contains('#') {
        return Ok(vec![load_camera(spec)?]);
    }
    let cams = load_cameras(Path::new(spec))?;
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

fn samples_for(header: &CheckpointHeader, flag: Option<usize>) -> usize {
    flag.or_else(|| {
        header
            .config
            .get("samples_per_ray")
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
    })
    .unwrap_or(DEFAULT_SAMPLES_PER_RAY)
}

fn render_cmd(a: RenderArgs, layers: bool) -> Result<()> {
    let (header, field) = load_checkpoint(&a.checkpoint)?;
    let camera = load_camera(&a.camera)?;
    let n = samples_for(&header, a.samples);
    log_config("render", &serde_json::json!({"checkpoint": a.checkpoint, "camera": a.camera, "samples_per_ray": n}));
    let frame = render(&field, &camera, n)?;
    if !layers {
        frame.save_rgb(&a.out)?;
        eprintln!("wrote {}", a.out.display());
        return Ok(());
    }
    frame.save_rgb(&a.out.join("color.png"))?;
    frame.save_depth(camera.far, &a.out.join("depth.png"))?;
    for (i, name) in field.class_set().names().iter().enumerate() {
        frame.save_mask(i, &a.out.join(format!("mask_{name}.png")))?;
        render_layer(&field, &camera, n, i)?.save_rgb(&a.out.join(format!("layer_{name}.png")))?;
    }
    eprintln!("wrote layers, masks and depth to {}", a.out.display());
    Ok(())
}

fn edit_cmd(a: EditArgs) -> Result<()> {
    let (header, field) = load_checkpoint(&a.checkpoint)?;
    let TrainedField::Layered(field) = field else {
        return Err(Error::invalid("edits need a layered checkpoint"));
    };
    let text = String::from_utf8(read_file(&a.edit)?).map_err(|e| Error::format(&a.edit, e.to_string()))?;
    let spec = EditSpec::from_json(&text)?;
    let edit = ResolvedEdit::resolve(&spec, field.class_set())?;
    let cameras = parse_camera_path(&a.cameras)?;
    let n = samples_for(&header, a.samples);
    log_config("edit", &serde_json::json!({"edit": spec, "frames": cameras.len(), "samples_per_ray": n}));
    for (k, cam) in cameras.iter().enumerate() {
        render_edited(&field, cam, &edit, n)?.save_rgb(&a.out.join(format!("frame_{k:04}.png")))?;
    }
    eprintln!("wrote {} frames to {}", cameras.len(), a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (header, field) = load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.scene)?;
    let n = samples_for(&header, a.samples);
    log_config("eval", &serde_json::json!({"split": a.split, "samples_per_ray": n}));
    let report = evaluate(&field, &dataset, &a.split, n)?;
    write_json(&a.out, &report)?;
    let miou = report.miou.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    println!("PSNR {}  mIoU {miou}  ({} views)", report.mean_psnr, report.view_count);
    Ok(())
}

/// Gradient checks pass below this relative error.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

fn grad_cmd(a: GradArgs) -> bool {
    let report = run_gradient_checks(a.seed, a.instances);
    for s in &report.suites {
        println!("{:<20} {:>7} entries  max rel error {:.3e}", s.name, s.entries_checked, s.max_rel_error);
    }
    println!("max relative error {:.3e}", report.max_rel_error);
    let ok = report.max_rel_error < GRADIENT_TOLERANCE;
    if !ok {
        eprintln!("gradient check failed: {:.3e} >= {GRADIENT_TOLERANCE:e}", report.max_rel_error);
    }
    ok
}
