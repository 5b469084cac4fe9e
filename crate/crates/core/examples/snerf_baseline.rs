//! Trains a shared-density field with class logits next to a layered field on a small
//! version of the bundled scene and compares the two on held-out views.
//!
//! ```text
//! cargo run --release --example snerf_baseline -- [iterations]
//! ```

use layered_radiance::io::load_dataset;
use layered_radiance::metrics::evaluate;
use layered_radiance::scenegen::{build_scene, emit_dataset, SceneSpec};
use layered_radiance::trainer::{train, TrainConfig, TrainMode};

fn main() -> layered_radiance::Result<()> {
    let iterations = std::env::args().nth(1).map_or(1500, |s| s.parse().expect("iterations must be an integer"));
    let mut spec = SceneSpec::from_json(layered_radiance::cli::BUNDLED_SCENE)?;
    spec.image.width = 64;
    spec.image.height = 64;
    spec.rig.focal *= 0.5;
    spec.render_steps = 2048;
    let dir = std::env::temp_dir().join("snerf_baseline");
    emit_dataset(&build_scene(&spec)?, &dir, &spec.mask_noise)?;
    let dataset = load_dataset(&dir)?;

    for mode in [TrainMode::Ssd, TrainMode::Snerf] {
        let cfg = TrainConfig {
            mode,
            iterations,
            resolution: [40; 3],
            rays_per_batch: 1024,
            ..TrainConfig::default()
        };
        let field = train(&dataset, &cfg, None, &serde_json::Value::Null, |_| {})?;
        let report = evaluate(&field, &dataset, "val", cfg.samples_per_ray)?;
        println!("{mode:?}: PSNR {}  mIoU {:?}", report.mean_psnr, report.miou);
    }
    Ok(())
}
