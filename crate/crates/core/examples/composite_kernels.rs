//! Composites one hand-built ray through three classes and prints the full render, the
//! soft masks and each class's layer.

use layered_radiance::compositing::{composite_full, composite_layer, composite_nerf};
use layered_radiance::field::RaySamples;

fn main() -> layered_radiance::Result<()> {
    let names = ["background", "red", "blue"];
    let colors = [[0.3, 0.4, 0.3], [0.9, 0.2, 0.2], [0.2, 0.3, 0.9]];
    let mut ray = RaySamples::with_classes(3);
    // Blue haze, then a red/blue overlap, then an opaque wall.
    let segments: [(f64, [f64; 3]); 4] = [
        (0.5, [0.0, 0.0, 0.4]),
        (0.5, [0.0, 1.5, 0.5]),
        (1.0, [0.0, 0.0, 0.0]),
        (0.5, [20.0, 0.0, 0.0]),
    ];
    let mut t = 1.0;
    for (delta, sigma) in segments {
        ray.push(t, delta, &sigma, &colors)?;
        t += delta;
    }

    let full = composite_full(&ray);
    println!("color {:.4?}  opacity {:.4}  depth {:.4}", full.color, full.acc_alpha, full.depth / full.acc_alpha);
    for (i, name) in names.iter().enumerate() {
        let layer = composite_layer(&ray, i)?;
        println!("{name:>10}: mask {:.4}  layer color {:.4?}  layer opacity {:.4}", full.mask[i], layer.color, layer.acc_alpha);
    }
    println!("masks sum to {:.6}", full.mask.iter().sum::<f64>());

    // With a single class the layered path is plain compositing.
    let single = ray.class_view(1)?;
    println!("one class: {:.6?} vs {:.6?}", composite_full(&single).color, composite_nerf(&single)?.color);
    Ok(())
}
