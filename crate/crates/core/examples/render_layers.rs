//! Renders a checkpoint from one dataset camera: color, depth, and each class's layer and
//! soft mask.
//!
//! ```text
//! cargo run --release --example render_layers -- [field.ckpt] [dataset_dir] [view] [out_dir]
//! ```
//! Defaults point at the output of the `train_blobs` example.

use std::path::PathBuf;

use layered_radiance::io::{load_checkpoint, load_dataset};
use layered_radiance::render::{render, render_layer, DEFAULT_SAMPLES_PER_RAY};

fn main() -> layered_radiance::Result<()> {
    let base = std::env::temp_dir().join("blobs3");
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().map_or_else(|| base.join("field.ckpt"), PathBuf::from);
    let data = args.next().map_or_else(|| base.join("data"), PathBuf::from);
    let view: usize = args.next().map_or(0, |s| s.parse().expect("view must be an index"));
    let out = args.next().map_or_else(|| base.join("layers"), PathBuf::from);

    let (_, field) = load_checkpoint(&ckpt)?;
    let dataset = load_dataset(&data)?;
    let camera = &dataset.views[view].camera;
    let n = DEFAULT_SAMPLES_PER_RAY;

    let frame = render(&field, camera, n)?;
    frame.save_rgb(&out.join("color.png"))?;
    frame.save_depth(camera.far, &out.join("depth.png"))?;
    for (i, name) in field.class_set().names().iter().enumerate() {
        frame.save_mask(i, &out.join(format!("mask_{name}.png")))?;
        let layer = render_layer(&field, camera, n, i)?;
        layer.save_rgb(&out.join(format!("layer_{name}.png")))?;
        let coverage = frame.mask_channel(i).iter().sum::<f64>() / frame.pixels.len() as f64;
        println!("{name:>12}: {:.1}% of the image", 100.0 * coverage);
    }
    println!("wrote {}", out.display());
    Ok(())
}
