//! Renders a scene spec with the reference integrator and writes a dataset.
//!
//! ```text
//! cargo run --release --example generate_scene -- [scene.json] [out_dir] [outlier_rate]
//! ```

use std::path::PathBuf;

use layered_radiance::io::load_dataset;
use layered_radiance::scenegen::{build_scene, emit_dataset, SceneSpec};

fn main() -> layered_radiance::Result<()> {
    let mut args = std::env::args().skip(1);
    let text = match args.next() {
        Some(p) if p != "-" => std::fs::read_to_string(&p).expect("readable scene spec"),
        _ => layered_radiance::cli::BUNDLED_SCENE.to_string(),
    };
    let out = args.next().map_or_else(|| std::env::temp_dir().join("scene"), PathBuf::from);
    let mut spec = SceneSpec::from_json(&text)?;
    if let Some(rate) = args.next() {
        spec.mask_noise.outlier_rate = rate.parse().expect("outlier rate must be a number");
    }

    let scene = build_scene(&spec)?;
    let report = emit_dataset(&scene, &out, &spec.mask_noise)?;
    let data = load_dataset(&out)?;
    println!(
        "{}: {} views ({} train, {} val) of {}x{}, classes {:?}",
        out.display(),
        report.views,
        data.train.len(),
        data.val.len(),
        spec.image.width,
        spec.image.height,
        data.class_set.names()
    );
    println!("corrupted {} of {} boundary tiles", report.noise.flipped_tiles, report.noise.boundary_tiles);
    for v in &data.views {
        let share: Vec<String> = (0..data.m())
            .map(|i| {
                let mass: f64 = (0..v.rgb.len()).map(|p| v.mask_at(p, data.m())[i]).sum();
                format!("{:.3}", mass / v.rgb.len() as f64)
            })
            .collect();
        println!("  {}  mask share {}", v.name, share.join(" "));
    }
    Ok(())
}
