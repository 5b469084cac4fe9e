//! Whole-image rendering of trained fields with deterministic midpoint sampling.

use std::path::Path;

use rayon::prelude::*;

use crate::compositing::{composite_channels, composite_full, composite_layer, composite_snerf_layer, RenderOutput, SnerfSample};
use crate::error::{Error, Result};
use crate::field::{RaySamples, SnerfField, VoxelField};
use crate::geometry::{midpoint, pixel_ray, sample_distances, Camera, Ray};
use crate::io::images::{encode_gray16, encode_rgb8};
use crate::io::{write_file, TrainedField};

pub const DEFAULT_SAMPLES_PER_RAY: usize = 128;

/// Row-major per-pixel render results of one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub m: usize,
    pub pixels: Vec<RenderOutput>,
}

impl Frame {
    pub fn colors(&self) -> Vec<[f64; 3]> {
        self.pixels.iter().map(|p| p.color).collect()
    }

    /// Soft masks flattened as `[pixel * m + class]`.
    pub fn masks(&self) -> Vec<f64> {
        self.pixels.iter().flat_map(|p| p.mask.iter().copied()).collect()
    }

    pub fn mask_channel(&self, class: usize) -> Vec<f64> {
        self.pixels.iter().map(|p| p.mask[class]).collect()
    }

    /// Expected depth divided by the accumulated opacity; 0 where nothing was hit.
    pub fn depth(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|p| if p.acc_alpha > 1e-6 { p.depth / p.acc_alpha } else { 0.0 })
            .collect()
    }

    pub fn save_rgb(&self, path: &Path) -> Result<()> {
        write_file(path, &encode_rgb8(self.width, self.height, &self.colors())?)
    }

    pub fn save_mask(&self, class: usize, path: &Path) -> Result<()> {
        write_file(path, &encode_gray16(self.width, self.height, &self.mask_channel(class))?)
    }

    /// Depth as a 16-bit image where white is `far`.
    pub fn save_depth(&self, far: f64, path: &Path) -> Result<()> {
        let scaled: Vec<f64> = self.depth().iter().map(|d| d / far).collect();
        write_file(path, &encode_gray16(self.width, self.height, &scaled)?)
    }
}

/// Renders every pixel center of `camera` with `shade`, rows in parallel. `init` builds
/// per-worker scratch state.
pub fn render_pixels<S, I, F>(camera: &Camera, m: usize, init: I, shade: F) -> Result<Frame>
where
    I: Fn() -> S + Sync,
    F: Fn(&mut S, &Ray) -> Result<RenderOutput> + Sync,
{
    camera.validate()?;
    let rows = (0..camera.height)
        .into_par_iter()
        .map_init(&init, |state, row| {
            (0..camera.width)
                .map(|col| shade(state, &pixel_ray(camera, col, row)?))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Frame {
        width: camera.width,
        height: camera.height,
        m,
        pixels: rows.into_iter().flatten().collect(),
    })
}

/// Reusable buffers for sampling one ray.
#[derive(Default)]
pub struct RayScratch {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub samples: RaySamples,
}

fn check_samples(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::invalid("samples per ray must be at least 1"))
    } else {
        Ok(())
    }
}

/// Midpoint-sampled layered samples of one ray.
pub fn sample_layered(field: &VoxelField, ray: &Ray, n: usize, scratch: &mut RayScratch) -> Result<()> {
    sample_distances(ray, n, midpoint(), &mut scratch.t, &mut scratch.delta)?;
    field.sample_ray(ray, &scratch.t, &scratch.delta, &mut scratch.samples);
    Ok(())
}

pub fn render_layered(field: &VoxelField, camera: &Camera, n: usize) -> Result<Frame> {
    check_samples(n)?;
    render_pixels(camera, field.m(), RayScratch::default, |s, ray| {
        sample_layered(field, ray, n, s)?;
        Ok(composite_full(&s.samples))
    })
}

/// Layer image of one class: that class composited alone.
pub fn render_layered_layer(field: &VoxelField, camera: &Camera, n: usize, class: usize) -> Result<Frame> {
    check_samples(n)?;
    if class >= field.m() {
        return Err(Error::invalid(format!("class {class} out of range")));
    }
    render_pixels(camera, field.m(), RayScratch::default, |s, ray| {
        sample_layered(field, ray, n, s)?;
        composite_layer(&s.samples, class)
    })
}

/// Numerically stable softmax of `logits` into `out`.
pub fn softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Midpoint samples of a logit field: samples carrying per-sample class probabilities,
/// and the raw logits flattened as `[sample * m + class]`.
pub fn sample_logit(field: &SnerfField, ray: &Ray, n: usize) -> Result<(Vec<SnerfSample>, Vec<f64>)> {
    let mut t = Vec::new();
    let mut delta = Vec::new();
    sample_distances(ray, n, midpoint(), &mut t, &mut delta)?;
    let m = field.m();
    let mut raw = vec![0.0; 4 + m];
    let mut logits = vec![0.0; m];
    let mut all_logits = Vec::with_capacity(n * m);
    let samples = t
        .iter()
        .zip(&delta)
        .map(|(&tj, &dj)| {
            let (sigma, color) = field.query_into(&ray.at(tj), &mut raw, &mut logits);
            all_logits.extend_from_slice(&logits);
            let mut p = vec![0.0; m];
            softmax(&logits, &mut p);
            SnerfSample { t: tj, delta: dj, sigma, color, p }
        })
        .collect();
    Ok((samples, all_logits))
}

/// Color, depth and opacity from the shared density. Logits are composited like color,
/// and the masks are their softmax scaled by the accumulated opacity, so they sum to it.
pub fn composite_logit(samples: &[SnerfSample], logits: &[f64], m: usize) -> RenderOutput {
    let t: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let delta: Vec<f64> = samples.iter().map(|s| s.delta).collect();
    let sigma: Vec<f64> = samples.iter().map(|s| s.sigma).collect();
    let colors: Vec<f64> = samples.iter().flat_map(|s| s.color).collect();
    let (color, depth, acc) = composite_channels(&t, &delta, &sigma, &colors, 3);
    let (mixed, _, _) = composite_channels(&t, &delta, &sigma, logits, m);
    let mut mask = vec![0.0; m];
    softmax(&mixed, &mut mask);
    for v in &mut mask {
        *v *= acc;
    }
    RenderOutput {
        color: [color[0], color[1], color[2]],
        mask,
        depth,
        acc_alpha: acc,
    }
}

pub fn render_logit(field: &SnerfField, camera: &Camera, n: usize) -> Result<Frame> {
    check_samples(n)?;
    let m = field.m();
    render_pixels(camera, m, || (), |_, ray| {
        let (samples, logits) = sample_logit(field, ray, n)?;
        Ok(composite_logit(&samples, &logits, m))
    })
}

pub fn render_logit_layer(field: &SnerfField, camera: &Camera, n: usize, class: usize) -> Result<Frame> {
    check_samples(n)?;
    render_pixels(camera, field.m(), || (), |_, ray| composite_snerf_layer(&sample_logit(field, ray, n)?.0, class))
}

/// Color, masks and depth of any trained field.
pub fn render(field: &TrainedField, camera: &Camera, n: usize) -> Result<Frame> {
    match field {
        TrainedField::Layered(f) => render_layered(f, camera, n),
        TrainedField::Logit(f) => render_logit(f, camera, n),
    }
}

/// Per-class layer image of any trained field.
pub fn render_layer(field: &TrainedField, camera: &Camera, n: usize, class: usize) -> Result<Frame> {
    match field {
        TrainedField::Layered(f) => render_layered_layer(f, camera, n, class),
        TrainedField::Logit(f) => render_logit_layer(f, camera, n, class),
    }
}
