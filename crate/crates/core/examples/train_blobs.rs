//! Generates the bundled three-class blob scene, trains a layered field on it and scores
//! the held-out views.
//!
//! ```text
//! cargo run --release --example train_blobs -- [iterations] [out_dir]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use layered_radiance::io::{load_dataset, save_checkpoint};
use layered_radiance::metrics::evaluate;
use layered_radiance::scenegen::{build_scene, emit_dataset, SceneSpec};
use layered_radiance::trainer::{train, TrainConfig};

fn main() -> layered_radiance::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map_or(5000, |s| s.parse().expect("iterations must be an integer"));
    let out = args.next().map_or_else(|| std::env::temp_dir().join("blobs3"), PathBuf::from);

    let spec = SceneSpec::from_json(include_str!("../scenes/blobs3.json"))?;
    let started = Instant::now();
    let scene = build_scene(&spec)?;
    let data_dir = out.join("data");
    emit_dataset(&scene, &data_dir, &spec.mask_noise)?;
    println!("dataset written to {} in {:.1?}", data_dir.display(), started.elapsed());

    let dataset = load_dataset(&data_dir)?;
    let cfg = TrainConfig { iterations, ..TrainConfig::default() };
    let started = Instant::now();
    let field = train(&dataset, &cfg, None, &serde_json::Value::Null, |r| {
        if r.step % 250 == 0 {
            println!(
                "step {:5}  loss {:.4}  batch psnr {:.2}  sem {:.3}  [{:.0?}]",
                r.step,
                r.total,
                r.psnr_batch,
                r.sem,
                started.elapsed()
            );
        }
    })?;
    save_checkpoint(&out.join("field.ckpt"), &field, &serde_json::to_value(&cfg).unwrap())?;

    let report = evaluate(&field, &dataset, "val", cfg.samples_per_ray)?;
    println!("held-out PSNR {}  mIoU {:?}", report.mean_psnr, report.miou);
    for c in &report.per_class_iou {
        println!("  {:12} IoU {:?}", c.class, c.iou);
    }
    Ok(())
}
