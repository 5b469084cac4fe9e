//! Edits a trained layered field: recolors one class, lifts another and removes a third,
//! then renders a dolly zoom of the result.
//!
//! ```text
//! cargo run --release --example edit_scene -- [field.ckpt] [dataset_dir] [out_dir]
//! ```
//! Defaults point at the output of the `train_blobs` example.

use std::path::PathBuf;

use layered_radiance::editing::{dolly_zoom_path, render_edited, EditSpec, ResolvedEdit};
use layered_radiance::io::{load_checkpoint, load_dataset, TrainedField};
use layered_radiance::render::DEFAULT_SAMPLES_PER_RAY;

const EDITS: &[(&str, &str)] = &[
    ("identity", "{}"),
    ("recolor", r#"{"red": {"color": {"matrix": [[0,0,0],[1,0,0],[0,0,0]], "offset": [0.1, 0.0, 0.1]}}}"#),
    ("lift", r#"{"blue": {"transform": {"translation": [0, 0, 1.5], "rotation_deg": [0, 0, 45]}}}"#),
    ("remove", r#"{"red": {"remove": true}}"#),
];

fn main() -> layered_radiance::Result<()> {
    let base = std::env::temp_dir().join("blobs3");
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().map_or_else(|| base.join("field.ckpt"), PathBuf::from);
    let data = args.next().map_or_else(|| base.join("data"), PathBuf::from);
    let out = args.next().map_or_else(|| base.join("edits"), PathBuf::from);

    let (_, field) = load_checkpoint(&ckpt)?;
    let TrainedField::Layered(field) = field else {
        panic!("edits need a layered checkpoint");
    };
    let dataset = load_dataset(&data)?;
    let camera = &dataset.views[dataset.val[0]].camera;
    let n = DEFAULT_SAMPLES_PER_RAY;

    for (name, json) in EDITS {
        let edit = ResolvedEdit::resolve(&EditSpec::from_json(json)?, field.class_set())?;
        render_edited(&field, camera, &edit, n)?.save_rgb(&out.join(format!("{name}.png")))?;
        println!("{name}: {json}");
    }

    // Edits compose: apply the lift, then the recolor.
    let lift = ResolvedEdit::resolve(&EditSpec::from_json(EDITS[2].1)?, field.class_set())?;
    let recolor = ResolvedEdit::resolve(&EditSpec::from_json(EDITS[1].1)?, field.class_set())?;
    let both = lift.then(&recolor)?;
    let path = dolly_zoom_path(camera, camera.position().norm(), 3.0, 12)?;
    for (k, cam) in path.iter().enumerate() {
        render_edited(&field, cam, &both, n)?.save_rgb(&out.join(format!("dolly_{k:04}.png")))?;
    }
    println!("wrote {} dolly frames to {}", path.len(), out.display());
    Ok(())
}
