//! Scores a checkpoint on a dataset split and prints the report as JSON.
//!
//! ```text
//! cargo run --release --example evaluate -- [field.ckpt] [dataset_dir] [split]
//! ```

use std::path::PathBuf;

use layered_radiance::io::{load_checkpoint, load_dataset};
use layered_radiance::metrics::evaluate;
use layered_radiance::render::DEFAULT_SAMPLES_PER_RAY;

fn main() -> layered_radiance::Result<()> {
    let base = std::env::temp_dir().join("blobs3");
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().map_or_else(|| base.join("field.ckpt"), PathBuf::from);
    let data = args.next().map_or_else(|| base.join("data"), PathBuf::from);
    let split = args.next().unwrap_or_else(|| "val".into());

    let (header, field) = load_checkpoint(&ckpt)?;
    let dataset = load_dataset(&data)?;
    let report = evaluate(&field, &dataset, &split, DEFAULT_SAMPLES_PER_RAY)?;
    println!("{:?} checkpoint, {} classes", header.kind, header.class_names.len());
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}
