//! Procedural scenes with analytically known per-class fields, a dense-quadrature
//! reference renderer, and dataset emission.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compositing::RenderOutput;
use crate::error::{Error, Result};
use crate::field::{Aabb, ClassSet};
use crate::geometry::{pixel_ray, Camera, Ray, Vec3};
use crate::io::dataset::{write_dataset, DatasetImages};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Constant density inside the ball.
    Sphere { center: [f64; 3], radius: f64 },
    /// Constant density inside an oriented box; rotation is XYZ Euler angles in degrees.
    /// With a positive `falloff`, density outside decays as a Gaussian of the distance to
    /// the box with that standard deviation.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        #[serde(default)]
        rotation_deg: [f64; 3],
        #[serde(default)]
        falloff: f64,
    },
    /// Isotropic Gaussian density falloff with standard deviation `scale`.
    SoftBlob { center: [f64; 3], scale: f64 },
    /// Hollow sphere, used to enclose the scene with a background layer.
    Shell {
        center: [f64; 3],
        inner_radius: f64,
        outer_radius: f64,
    },
}

impl Shape {
    pub fn center(&self) -> Vec3 {
        let c = match self {
            Shape::Sphere { center, .. }
            | Shape::Box { center, .. }
            | Shape::SoftBlob { center, .. }
            | Shape::Shell { center, .. } => center,
        };
        Vec3::from(*c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Peak density (per unit length).
    pub density: f64,
    pub color: [f64; 3],
    pub class: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub radius: f64,
    pub elevation_deg: f64,
    /// Elevation oscillates by this amount around `elevation_deg` along the orbit.
    #[serde(default)]
    pub elevation_wobble_deg: f64,
    pub count: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Every `val_every`-th view is held out for validation; 0 keeps all views for training.
    #[serde(default)]
    pub val_every: usize,
    /// Look-at point; defaults to the centroid of the primitives.
    #[serde(default)]
    pub target: Option<[f64; 3]>,
    #[serde(default = "default_up")]
    pub up: [f64; 3],
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

/// Blob-shaped corruption of training masks, emulating detector outliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskNoise {
    /// Probability that a tile straddling a class boundary receives a flipped blob.
    pub outlier_rate: f64,
    pub tile_size: u32,
    /// Blob radius in tile widths.
    pub blob_radius: f64,
    pub seed: u64,
}

impl Default for MaskNoise {
    fn default() -> Self {
        MaskNoise {
            outlier_rate: 0.0,
            tile_size: 8,
            blob_radius: 0.75,
            seed: 0,
        }
    }
}

fn default_render_steps() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub classes: Vec<String>,
    pub background_class: String,
    pub primitives: Vec<Primitive>,
    pub rig: CameraRig,
    pub image: ImageSize,
    pub t_near: f64,
    pub t_far: f64,
    /// Region a trainable grid should cover.
    pub bounds: Aabb,
    /// Quadrature steps per ray for the reference renders.
    #[serde(default = "default_render_steps")]
    pub render_steps: usize,
    #[serde(default)]
    pub mask_noise: MaskNoise,
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("scene spec: {e}")))
    }

    pub fn class_set(&self) -> Result<ClassSet> {
        let bg = self
            .classes
            .iter()
            .position(|c| c == &self.background_class)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "background_class: {:?} is not one of the classes",
                    self.background_class
                ))
            })?;
        ClassSet::new(self.classes.clone(), bg)
    }

    pub fn validate(&self) -> Result<ClassSet> {
        let classes = self.class_set()?;
        let bad = |path: String, why: &str| Err(Error::invalid(format!("{path}: {why}")));
        for (n, p) in self.primitives.iter().enumerate() {
            let at = |f: &str| format!("primitives[{n}].{f}");
            if classes.index_of(&p.class).is_none() {
                return bad(at("class"), "unknown class");
            }
            if !(p.density.is_finite() && p.density >= 0.0) {
                return bad(at("density"), "must be finite and >= 0");
            }
            if p.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad(at("color"), "components must lie in [0, 1]");
            }
            let ok = match &p.shape {
                Shape::Sphere { radius, .. } => *radius > 0.0,
                Shape::Box { half_extents, falloff, .. } => {
                    half_extents.iter().all(|h| *h > 0.0) && *falloff >= 0.0 && falloff.is_finite()
                }
                Shape::SoftBlob { scale, .. } => *scale > 0.0,
                Shape::Shell {
                    inner_radius,
                    outer_radius,
                    ..
                } => *inner_radius >= 0.0 && outer_radius > inner_radius,
            };
            if !ok {
                return bad(at("shape"), "sizes must be positive");
            }
        }
        if self.rig.count < 2 {
            return bad("rig.count".into(), "need at least 2 cameras");
        }
        if !(self.rig.radius > 0.0 && self.rig.focal > 0.0) {
            return bad("rig".into(), "radius and focal must be positive");
        }
        if self.rig.val_every == 1 {
            return bad("rig.val_every".into(), "would leave no training views");
        }
        if self.image.width == 0 || self.image.height == 0 {
            return bad("image".into(), "zero size");
        }
        if !(0.0 <= self.t_near && self.t_near < self.t_far) {
            return bad("t_near".into(), "need 0 <= t_near < t_far");
        }
        if self.render_steps == 0 {
            return bad("render_steps".into(), "must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.mask_noise.outlier_rate) || self.mask_noise.tile_size == 0 {
            return bad("mask_noise".into(), "rate must lie in [0, 1] and tile_size be positive");
        }
        Ok(classes)
    }
}

/// Anything that assigns per-class densities and colors to points.
pub trait RadianceFunction: Sync {
    fn classes(&self) -> usize;
    fn eval(&self, x: &Vec3, sigma: &mut [f64], color: &mut [[f64; 3]]);
}

#[derive(Clone, Debug)]
enum CompiledShape {
    Sphere { center: Vec3, radius2: f64 },
    Box { center: Vec3, world_to_local: Matrix3<f64>, half: Vec3, falloff: f64 },
    Blob { center: Vec3, inv_two_var: f64 },
    Shell { center: Vec3, inner2: f64, outer2: f64 },
}

#[derive(Clone, Debug)]
struct CompiledPrimitive {
    shape: CompiledShape,
    density: f64,
    color: [f64; 3],
    class: usize,
}

/// Ground-truth field of a [`SceneSpec`]. Densities of primitives in the same class add;
/// the class color is their density-weighted mean.
#[derive(Clone, Debug)]
pub struct AnalyticField {
    m: usize,
    primitives: Vec<CompiledPrimitive>,
}

impl AnalyticField {
    fn compile(spec: &SceneSpec, classes: &ClassSet) -> Self {
        let primitives = spec
            .primitives
            .iter()
            .map(|p| {
                let shape = match &p.shape {
                    Shape::Sphere { center, radius } => CompiledShape::Sphere {
                        center: Vec3::from(*center),
                        radius2: radius * radius,
                    },
                    Shape::Box {
                        center,
                        half_extents,
                        rotation_deg,
                        falloff,
                    } => {
                        let [rx, ry, rz] = rotation_deg.map(f64::to_radians);
                        let rot = Rotation3::from_euler_angles(rx, ry, rz);
                        CompiledShape::Box {
                            center: Vec3::from(*center),
                            world_to_local: rot.inverse().into_inner(),
                            half: Vec3::from(*half_extents),
                            falloff: *falloff,
                        }
                    }
                    Shape::SoftBlob { center, scale } => CompiledShape::Blob {
                        center: Vec3::from(*center),
                        inv_two_var: 1.0 / (2.0 * scale * scale),
                    },
                    Shape::Shell {
                        center,
                        inner_radius,
                        outer_radius,
                    } => CompiledShape::Shell {
                        center: Vec3::from(*center),
                        inner2: inner_radius * inner_radius,
                        outer2: outer_radius * outer_radius,
                    },
                };
                CompiledPrimitive {
                    shape,
                    density: p.density,
                    color: p.color,
                    class: classes.index_of(&p.class).expect("validated"),
                }
            })
            .collect();
        AnalyticField {
            m: classes.m(),
            primitives,
        }
    }
}

impl RadianceFunction for AnalyticField {
    fn classes(&self) -> usize {
        self.m
    }

    fn eval(&self, x: &Vec3, sigma: &mut [f64], color: &mut [[f64; 3]]) {
        sigma[..self.m].fill(0.0);
        color[..self.m].fill([0.0; 3]);
        for p in &self.primitives {
            let s = match &p.shape {
                CompiledShape::Sphere { center, radius2 } => {
                    if (x - center).norm_squared() <= *radius2 {
                        p.density
                    } else {
                        0.0
                    }
                }
                CompiledShape::Box {
                    center,
                    world_to_local,
                    half,
                    falloff,
                } => {
                    let local = world_to_local * (x - center);
                    let outside2: f64 = (0..3).map(|a| (local[a].abs() - half[a]).max(0.0).powi(2)).sum();
                    if outside2 == 0.0 {
                        p.density
                    } else if *falloff > 0.0 {
                        p.density * (-outside2 / (2.0 * falloff * falloff)).exp()
                    } else {
                        0.0
                    }
                }
                CompiledShape::Blob {
                    center,
                    inv_two_var,
                } => p.density * (-(x - center).norm_squared() * inv_two_var).exp(),
                CompiledShape::Shell {
                    center,
                    inner2,
                    outer2,
                } => {
                    let r2 = (x - center).norm_squared();
                    if r2 >= *inner2 && r2 <= *outer2 {
                        p.density
                    } else {
                        0.0
                    }
                }
            };
            if s > 0.0 {
                sigma[p.class] += s;
                for k in 0..3 {
                    color[p.class][k] += s * p.color[k];
                }
            }
        }
        for i in 0..self.m {
            if sigma[i] > 0.0 {
                for k in 0..3 {
                    color[i][k] /= sigma[i];
                }
            }
        }
    }
}

/// A built scene: ground-truth field, orbit cameras and the train/validation split.
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub field: AnalyticField,
    pub cameras: Vec<Camera>,
    pub class_set: ClassSet,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn build_scene(spec: &SceneSpec) -> Result<Scene> {
    let class_set = spec.validate()?;
    let field = AnalyticField::compile(spec, &class_set);
    let target = match spec.rig.target {
        Some(t) => Vec3::from(t),
        None if spec.primitives.is_empty() => Vec3::zeros(),
        None => {
            spec.primitives.iter().map(|p| p.shape.center()).sum::<Vec3>() / spec.primitives.len() as f64
        }
    };
    let rig = &spec.rig;
    let mut cameras = Vec::with_capacity(rig.count);
    for k in 0..rig.count {
        let phase = k as f64 / rig.count as f64;
        let azimuth = 2.0 * PI * phase;
        let elevation = (rig.elevation_deg + rig.elevation_wobble_deg * (4.0 * PI * phase).sin()).to_radians();
        let offset = Vec3::new(
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        ) * rig.radius;
        cameras.push(Camera::look_at(
            target + offset,
            target,
            Vec3::from(rig.up),
            spec.image.width,
            spec.image.height,
            rig.focal,
            spec.t_near,
            spec.t_far,
        )?);
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..rig.count)
        .partition(|&k| rig.val_every > 0 && k % rig.val_every == rig.val_every - 1);
    Ok(Scene {
        spec: spec.clone(),
        field,
        cameras,
        class_set,
        train,
        val,
    })
}

/// Optical depth past which the reference integrator stops: the remaining light is below
/// `exp(-40)`.
const TERMINATION_DEPTH: f64 = 40.0;

/// Dense midpoint-rule evaluation of the continuous rendering integral over
/// `[t_near, t_far]`. `layer` restricts the integral to one class as if all others were
/// empty.
pub fn quadrature_render<F: RadianceFunction + ?Sized>(
    field: &F,
    ray: &Ray,
    steps: usize,
    layer: Option<usize>,
) -> Result<RenderOutput> {
    if steps == 0 {
        return Err(Error::invalid("quadrature needs at least one step"));
    }
    let m = field.classes();
    if layer.is_some_and(|l| l >= m) {
        return Err(Error::invalid("layer index out of range"));
    }
    let h = (ray.t_far - ray.t_near) / steps as f64;
    let mut sigma = vec![0.0; m];
    let mut color = vec![[0.0; 3]; m];
    let mut out = RenderOutput::empty(m);
    let mut optical_depth = 0.0;
    for s in 0..steps {
        let t = ray.t_near + (s as f64 + 0.5) * h;
        field.eval(&ray.at(t), &mut sigma, &mut color);
        if let Some(l) = layer {
            for i in (0..m).filter(|&i| i != l) {
                sigma[i] = 0.0;
            }
        }
        let total: f64 = sigma.iter().sum();
        if total == 0.0 {
            continue;
        }
        let trans_mid = (-(optical_depth + 0.5 * total * h)).exp();
        for i in 0..m {
            let absorbed = trans_mid * sigma[i] * h;
            out.mask[i] += absorbed;
            for k in 0..3 {
                out.color[k] += absorbed * color[i][k];
            }
        }
        out.depth += trans_mid * total * h * t;
        out.acc_alpha += trans_mid * total * h;
        optical_depth += total * h;
        if optical_depth > TERMINATION_DEPTH {
            break;
        }
    }
    Ok(out)
}

/// Reference render of one camera: row-major pixel outputs.
pub fn render_reference<F: RadianceFunction + ?Sized>(field: &F, camera: &Camera, steps: usize) -> Result<Vec<RenderOutput>> {
    (0..camera.height)
        .into_par_iter()
        .map(|row| {
            (0..camera.width)
                .map(|col| quadrature_render(field, &pixel_ray(camera, col, row)?, steps, None))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()
        .map(|rows| rows.into_iter().flatten().collect())
}

/// Tally of a mask corruption pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub boundary_tiles: usize,
    pub flipped_tiles: usize,
}

impl std::ops::AddAssign for NoiseStats {
    fn add_assign(&mut self, rhs: Self) {
        self.boundary_tiles += rhs.boundary_tiles;
        self.flipped_tiles += rhs.flipped_tiles;
    }
}

fn hard_label(mask: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in mask.iter().enumerate() {
        if v > 0.0 && best.is_none_or(|b| v > mask[b]) {
            best = Some(i);
        }
    }
    best
}

/// Flips disc-shaped regions of a soft mask image (`masks[pixel * m + class]`) to a wrong
/// class. Candidate tiles are those containing more than one hard label; each is hit with
/// probability `noise.outlier_rate`. Flipped pixels keep their total mask mass.
pub fn corrupt_masks(masks: &mut [f64], m: usize, width: u32, height: u32, noise: &MaskNoise, rng: &mut impl Rng) -> NoiseStats {
    let (w, h) = (width as usize, height as usize);
    let tile = noise.tile_size as usize;
    let labels: Vec<Option<usize>> = (0..w * h).map(|p| hard_label(&masks[p * m..(p + 1) * m])).collect();
    let mut stats = NoiseStats::default();
    if m < 2 {
        return stats;
    }
    let radius = noise.blob_radius * tile as f64;
    for ty in (0..h).step_by(tile) {
        for tx in (0..w).step_by(tile) {
            let (x1, y1) = ((tx + tile).min(w), (ty + tile).min(h));
            let first = labels[ty * w + tx];
            let boundary = (ty..y1).any(|y| (tx..x1).any(|x| labels[y * w + x] != first));
            if !boundary {
                continue;
            }
            stats.boundary_tiles += 1;
            if !(rng.gen::<f64>() < noise.outlier_rate) {
                continue;
            }
            stats.flipped_tiles += 1;
            let cx = rng.gen_range(tx as f64..x1 as f64);
            let cy = rng.gen_range(ty as f64..y1 as f64);
            let under = labels[(cy as usize) * w + cx as usize];
            let replacement = loop {
                let c = rng.gen_range(0..m);
                if Some(c) != under {
                    break c;
                }
            };
            let (lo_x, hi_x) = ((cx - radius).floor().max(0.0) as usize, ((cx + radius).ceil() as usize).min(w));
            let (lo_y, hi_y) = ((cy - radius).floor().max(0.0) as usize, ((cy + radius).ceil() as usize).min(h));
            for y in lo_y..hi_y {
                for x in lo_x..hi_x {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy > radius * radius {
                        continue;
                    }
                    let px = &mut masks[(y * w + x) * m..(y * w + x + 1) * m];
                    let mass: f64 = px.iter().sum();
                    px.fill(0.0);
                    px[replacement] = mass;
                }
            }
        }
    }
    stats
}

/// Summary of an emitted dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmitReport {
    pub views: usize,
    pub noise: NoiseStats,
}

/// Reference renders of every camera of `scene`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedViews {
    pub rgb: Vec<Vec<[f64; 3]>>,
    /// `masks[view][pixel * m + class]`.
    pub masks: Vec<Vec<f64>>,
}

pub fn render_views(scene: &Scene) -> Result<RenderedViews> {
    let mut out = RenderedViews { rgb: vec![], masks: vec![] };
    for camera in &scene.cameras {
        let pixels = render_reference(&scene.field, camera, scene.spec.render_steps)?;
        out.rgb.push(pixels.iter().map(|p| p.color).collect());
        out.masks.push(pixels.iter().flat_map(|p| p.mask.iter().copied()).collect());
    }
    Ok(out)
}

/// Renders every camera of `scene` with the reference integrator and writes the dataset.
/// Mask corruption, when enabled, touches training views only.
pub fn emit_dataset(scene: &Scene, out_dir: &Path, noise: &MaskNoise) -> Result<EmitReport> {
    emit_rendered(scene, &render_views(scene)?, out_dir, noise)
}

/// Writes a dataset from renders made earlier by [`render_views`].
pub fn emit_rendered(scene: &Scene, views: &RenderedViews, out_dir: &Path, noise: &MaskNoise) -> Result<EmitReport> {
    let m = scene.class_set.m();
    if views.rgb.len() != scene.cameras.len() || views.masks.len() != scene.cameras.len() {
        return Err(Error::invalid("rendered views do not match the scene cameras"));
    }
    let mut images = DatasetImages {
        rgb: views.rgb.clone(),
        masks: views.masks.clone(),
    };
    let mut stats = NoiseStats::default();
    for (k, camera) in scene.cameras.iter().enumerate() {
        if noise.outlier_rate > 0.0 && scene.train.contains(&k) {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ k as u64);
            stats += corrupt_masks(&mut images.masks[k], m, camera.width, camera.height, noise, &mut rng);
        }
    }
    let mut spec = scene.spec.clone();
    spec.mask_noise = noise.clone();
    write_dataset(out_dir, &spec, scene, &images, stats)?;
    Ok(EmitReport {
        views: scene.cameras.len(),
        noise: stats,
    })
}
