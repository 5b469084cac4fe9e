//! Optimization loop: batch assembly, forward and backward passes, Adam updates,
//! JSON-lines logging and checkpoints.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compositing::{
    composite_backward_into, composite_channels, composite_channels_backward, composite_full, BackwardScratch,
    RenderGrad, RenderOutput, SampleGrads,
};
use crate::error::{Error, Result};
use crate::field::{RaySamples, SnerfField, VoxelField};
use crate::geometry::{pixel_ray, sample_distances, Ray, Sampling};
use crate::io::{save_checkpoint, Dataset, TrainedField};
use crate::losses::{
    color_loss, instantaneous_recall, opacity_penalties_ray, semantic_loss, total_loss, GroundTruthRay, LossConfig,
    LossReport,
};
use crate::render::{softmax, DEFAULT_SAMPLES_PER_RAY};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// One density and color per class, supervised through the soft masks.
    #[default]
    Ssd,
    /// Single density with per-class logits composited like color and trained with
    /// cross-entropy against hard labels.
    Snerf,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssd" => Ok(TrainMode::Ssd),
            "snerf" => Ok(TrainMode::Snerf),
            other => Err(Error::invalid(format!("unknown mode {other:?} (expected ssd or snerf)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rays_per_batch: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Reduce gradients over a fixed number of chunks so results do not depend on the
    /// thread count.
    pub deterministic: bool,
    /// Chunk count used when `deterministic` is set.
    pub grad_chunks: usize,
    pub loss: LossConfig,
    pub mode: TrainMode,
    pub samples_per_ray: usize,
    /// Jitter sample stations inside their bins; midpoints otherwise.
    pub stratified: bool,
    pub resolution: [usize; 3],
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rays_per_batch: 2048,
            iterations: 5000,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-15,
            seed: 0,
            deterministic: false,
            grad_chunks: 1,
            loss: LossConfig::default(),
            mode: TrainMode::Ssd,
            samples_per_ray: DEFAULT_SAMPLES_PER_RAY,
            stratified: true,
            resolution: [64; 3],
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("rays_per_batch", self.rays_per_batch),
            ("samples_per_ray", self.samples_per_ray),
            ("grad_chunks", self.grad_chunks),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.resolution.iter().any(|&r| r < 2) {
            return Err(Error::invalid("resolution needs at least 2 vertices per axis"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        self.loss.validate()
    }

    fn chunks(&self) -> usize {
        if self.deterministic {
            self.grad_chunks
        } else {
            rayon::current_num_threads()
        }
    }
}

/// Adam moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step. Refuses non-finite gradients before touching anything.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::invalid("adam_update: parameter, gradient and moment shapes differ"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter {i} is {}", grads[i])));
    }
    state.step += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let lr = cfg.learning_rate;
    let eps = cfg.adam_eps;
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// A training ray with its supervision and the seed of its sample jitter.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRay {
    pub view: usize,
    pub pixel: usize,
    pub ray: Ray,
    pub gt: GroundTruthRay,
    pub jitter_seed: u64,
}

/// Picks one training view uniformly, then `n` of its pixels uniformly with replacement.
pub fn sample_batch(dataset: &Dataset, views: &[usize], n: usize, rng: &mut impl Rng) -> Result<Vec<BatchRay>> {
    if views.is_empty() || dataset.views.is_empty() {
        return Err(Error::invalid("no training views to sample from"));
    }
    let view_index = views[rng.gen_range(0..views.len())];
    let view = dataset
        .views
        .get(view_index)
        .ok_or_else(|| Error::invalid(format!("view {view_index} does not exist")))?;
    let m = dataset.m();
    let w = view.camera.width as usize;
    let pixels = view.camera.pixel_count();
    (0..n)
        .map(|_| {
            let pixel = rng.gen_range(0..pixels);
            let ray = pixel_ray(&view.camera, (pixel % w) as u32, (pixel / w) as u32)?;
            Ok(BatchRay {
                view: view_index,
                pixel,
                ray,
                gt: GroundTruthRay {
                    color: view.rgb[pixel],
                    mask: view.mask_at(pixel, m).to_vec(),
                },
                jitter_seed: rng.gen(),
            })
        })
        .collect()
}

/// Per-ray buffers kept across steps.
#[derive(Default)]
struct RayWork {
    samples: RaySamples,
    /// Raw class logits per sample (logit mode only).
    logits: Vec<f64>,
    out: RenderOutput,
    /// Composited logits (logit mode only).
    logit_out: Vec<f64>,
}

#[derive(Default)]
struct ChunkScratch {
    grads: SampleGrads,
    backward: BackwardScratch,
    field: Vec<f64>,
    d_sigma: Vec<f64>,
    d_values: Vec<f64>,
    values: Vec<f64>,
}

/// Reusable allocations for [`train_step`].
#[derive(Default)]
pub struct StepWorkspace {
    rays: Vec<RayWork>,
    chunk_grads: Vec<Vec<f64>>,
}

fn forward_ray(field: &TrainedField, br: &BatchRay, cfg: &TrainConfig, work: &mut RayWork) -> Result<()> {
    let mut t = Vec::with_capacity(cfg.samples_per_ray);
    let mut delta = Vec::with_capacity(cfg.samples_per_ray);
    if cfg.stratified {
        let mut rng = ChaCha8Rng::seed_from_u64(br.jitter_seed);
        sample_distances(&br.ray, cfg.samples_per_ray, Sampling::Stratified(&mut rng), &mut t, &mut delta)?;
    } else {
        sample_distances(&br.ray, cfg.samples_per_ray, crate::geometry::midpoint(), &mut t, &mut delta)?;
    }
    match field {
        TrainedField::Layered(f) => f.sample_ray(&br.ray, &t, &delta, &mut work.samples),
        TrainedField::Logit(f) => sample_logit_ray(f, &br.ray, &t, &delta, work),
    }
    work.out = composite_full(&work.samples);
    if let TrainedField::Logit(f) = field {
        let (logit_out, _, _) = composite_channels(&t, &delta, &work.samples.sigma, &work.logits, f.m());
        work.logit_out = logit_out;
    }
    Ok(())
}

fn sample_logit_ray(field: &SnerfField, ray: &Ray, t: &[f64], delta: &[f64], work: &mut RayWork) {
    let m = field.m();
    let s = &mut work.samples;
    s.clear();
    s.m = 1;
    work.logits.clear();
    let mut raw = vec![0.0; 4 + m];
    let mut logits = vec![0.0; m];
    for (&tj, &dj) in t.iter().zip(delta) {
        let (sigma, color) = field.query_into(&ray.at(tj), &mut raw, &mut logits);
        s.t.push(tj);
        s.delta.push(dj);
        s.sigma.push(sigma);
        s.color.push(color);
        work.logits.extend_from_slice(&logits);
    }
}

/// Cross-entropy of the softmax of composited logits against the ground-truth argmax,
/// with its gradient on the composited logits. Rays without a label contribute nothing.
fn cross_entropy(logits: &[f64], gt: &GroundTruthRay, grad: &mut [f64]) -> f64 {
    grad.fill(0.0);
    let Some(label) = gt.label() else {
        return 0.0;
    };
    softmax(logits, grad);
    let loss = -grad[label].max(1e-300).ln();
    grad[label] -= 1.0;
    loss
}

/// Per-ray upstream gradients of the supervised terms, and their values.
struct Supervision {
    color: Vec<[f64; 3]>,
    /// Layered mode: mask gradients. Logit mode: composited-logit gradients.
    sem: Vec<Vec<f64>>,
    color_value: f64,
    sem_value: f64,
}

fn supervise(field: &TrainedField, batch: &[BatchRay], rays: &[RayWork], cfg: &TrainConfig) -> Result<Supervision> {
    let outputs: Vec<RenderOutput> = rays.iter().map(|r| r.out.clone()).collect();
    let gts: Vec<GroundTruthRay> = batch.iter().map(|b| b.gt.clone()).collect();
    let (color_value, color) = color_loss(&outputs, &gts)?;
    let (sem_value, sem) = match field {
        TrainedField::Layered(_) => {
            let recall = instantaneous_recall(&outputs, &gts)?;
            semantic_loss(&outputs, &gts, &recall, &cfg.loss)?
        }
        TrainedField::Logit(f) => {
            let mut total = 0.0;
            let grads = rays
                .iter()
                .zip(&gts)
                .map(|(r, gt)| {
                    let mut g = vec![0.0; f.m()];
                    total += cross_entropy(&r.logit_out, gt, &mut g);
                    g
                })
                .collect();
            (total, grads)
        }
    };
    Ok(Supervision {
        color,
        sem,
        color_value,
        sem_value,
    })
}

/// Backward pass of one chunk of rays into `grads`; returns the opacity penalty sums.
#[allow(clippy::too_many_arguments)]
fn backward_chunk(
    field: &TrainedField,
    batch: &[BatchRay],
    rays: &[RayWork],
    sup_color: &[[f64; 3]],
    sup_sem: &[Vec<f64>],
    cfg: &TrainConfig,
    ray_scale: f64,
    grads: &mut [f64],
) -> (f64, f64) {
    grads.fill(0.0);
    let lc = &cfg.loss;
    let mut s = ChunkScratch::default();
    let (mut sparse, mut group) = (0.0, 0.0);
    for ((br, work), (g_color, g_sem)) in batch.iter().zip(rays).zip(sup_color.iter().zip(sup_sem)) {
        let samples = &work.samples;
        let m = samples.m;
        let mut upstream = RenderGrad::zeros(m);
        upstream.color = *g_color;
        if let TrainedField::Layered(_) = field {
            for (u, &g) in upstream.mask.iter_mut().zip(g_sem) {
                *u = lc.lambda_sem * g;
            }
        }
        composite_backward_into(samples, &upstream, &mut s.grads, &mut s.backward);
        let (sp, gr) = opacity_penalties_ray(
            samples,
            lc.gamma_sparse,
            lc.eps_pow,
            lc.lambda_sparse * ray_scale,
            lc.lambda_group * ray_scale,
            &mut s.grads.d_sigma,
        );
        sparse += sp;
        group += gr;
        match field {
            TrainedField::Layered(f) => {
                s.field.resize(4 * m, 0.0);
                for j in 0..samples.len() {
                    let x = br.ray.at(samples.t[j]);
                    f.backprop_activated(
                        &x,
                        samples.sigma_at(j),
                        samples.color_at(j),
                        &s.grads.d_sigma[j * m..(j + 1) * m],
                        &s.grads.d_color[j * m..(j + 1) * m],
                        &mut s.field,
                        grads,
                    );
                }
            }
            TrainedField::Logit(f) => {
                let k = f.m();
                let g_out: Vec<f64> = g_sem.iter().map(|g| lc.lambda_sem * g).collect();
                s.values.clear();
                s.values.extend_from_slice(&work.logits);
                composite_channels_backward(
                    &samples.t,
                    &samples.delta,
                    &samples.sigma,
                    &s.values,
                    k,
                    &g_out,
                    0.0,
                    0.0,
                    &mut s.d_sigma,
                    &mut s.d_values,
                    &mut s.backward,
                );
                s.field.resize(4 + k, 0.0);
                for j in 0..samples.len() {
                    let x = br.ray.at(samples.t[j]);
                    f.backprop_activated(
                        &x,
                        samples.sigma[j],
                        samples.color[j],
                        s.grads.d_sigma[j] + s.d_sigma[j],
                        s.grads.d_color[j],
                        &s.d_values[j * k..(j + 1) * k],
                        &mut s.field,
                        grads,
                    );
                }
            }
        }
    }
    (sparse, group)
}

fn params_mut(field: &mut TrainedField) -> &mut [f64] {
    match field {
        TrainedField::Layered(f) => f.params_mut(),
        TrainedField::Logit(f) => f.params_mut(),
    }
}

/// Forward pass, loss, backward pass and one Adam update on `batch`.
pub fn train_step(
    field: &mut TrainedField,
    batch: &[BatchRay],
    cfg: &TrainConfig,
    adam: &mut AdamState,
    ws: &mut StepWorkspace,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    ws.rays.resize_with(batch.len(), RayWork::default);
    {
        let f = &*field;
        batch
            .par_iter()
            .zip(ws.rays.par_iter_mut())
            .try_for_each(|(br, work)| forward_ray(f, br, cfg, work))?;
    }
    let rays = &ws.rays[..batch.len()];
    let sup = supervise(field, batch, rays, cfg)?;

    let n_params = field.grid().data().len();
    let chunks = cfg.chunks().min(batch.len());
    let chunk_len = batch.len().div_ceil(chunks);
    ws.chunk_grads.resize_with(chunks, Vec::new);
    for g in &mut ws.chunk_grads {
        g.resize(n_params, 0.0);
    }
    let ray_scale = cfg.loss.ray_scale(batch.len());
    let f = &*field;
    let sums: Vec<(f64, f64)> = ws.chunk_grads[..chunks]
        .par_iter_mut()
        .enumerate()
        .map(|(c, grads)| {
            let r = c * chunk_len..((c + 1) * chunk_len).min(batch.len());
            backward_chunk(
                f,
                &batch[r.clone()],
                &rays[r.clone()],
                &sup.color[r.clone()],
                &sup.sem[r],
                cfg,
                ray_scale,
                grads,
            )
        })
        .collect();
    let (head, tail) = ws.chunk_grads.split_at_mut(1);
    for other in &tail[..chunks - 1] {
        for (a, b) in head[0].iter_mut().zip(other) {
            *a += b;
        }
    }
    let (sparse, group) = sums.iter().fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    let report = total_loss(sup.color_value, sup.sem_value, sparse * ray_scale, group * ray_scale, &cfg.loss);
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {:?}", report)));
    }
    adam_update(params_mut(field), &head[0], adam, cfg)?;
    Ok(report)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub color: f64,
    pub sem: f64,
    pub sparse: f64,
    pub group: f64,
    /// PSNR of the batch colors, from the color term.
    pub psnr_batch: f64,
}

/// Fresh field matching the dataset's classes and bounds.
pub fn initial_field(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainedField> {
    let bounds = dataset.spec.bounds;
    let classes = dataset.class_set.clone();
    Ok(match cfg.mode {
        TrainMode::Ssd => TrainedField::Layered(VoxelField::new(cfg.resolution, bounds, classes)?),
        TrainMode::Snerf => TrainedField::Logit(SnerfField::new(cfg.resolution, bounds, classes)?),
    })
}

/// Stateful training run over a loaded dataset.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    cfg: TrainConfig,
    field: TrainedField,
    adam: AdamState,
    rng: ChaCha8Rng,
    step: usize,
    ws: StepWorkspace,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if dataset.train.is_empty() {
            return Err(Error::invalid("dataset has no training views"));
        }
        let field = initial_field(dataset, &cfg)?;
        let adam = AdamState::new(field.grid().data().len());
        Ok(Trainer {
            dataset,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            field,
            adam,
            step: 0,
            ws: StepWorkspace::default(),
        })
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = sample_batch(self.dataset, &self.dataset.train, self.cfg.rays_per_batch, &mut self.rng)?;
        let report = train_step(&mut self.field, &batch, &self.cfg, &mut self.adam, &mut self.ws)
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("step {}: {msg}", self.step + 1)),
                other => other,
            })?;
        self.step += 1;
        let mse = report.color / (3 * batch.len()) as f64;
        Ok(StepRecord {
            step: self.step,
            total: report.total,
            color: report.color,
            sem: report.sem,
            sparse: report.sparse,
            group: report.group,
            psnr_batch: -10.0 * mse.log10(),
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn field(&self) -> &TrainedField {
        &self.field
    }

    pub fn into_field(self) -> TrainedField {
        self.field
    }
}

/// Where [`train`] writes its outputs.
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("field.ckpt")
    }

    pub fn checkpoint_at(&self, step: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
    }
}

/// Runs `cfg.iterations` steps. With an output directory, writes the JSON-lines log,
/// periodic checkpoints and the final checkpoint, each embedding `config` (the resolved
/// configuration). `on_step` sees every log record.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
    config: &serde_json::Value,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainedField> {
    let mut trainer = Trainer::new(dataset, cfg.clone())?;
    let outputs = out.map(|d| TrainOutputs { dir: d.to_path_buf() });
    let mut log = match &outputs {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let path = o.log();
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((path, std::io::BufWriter::new(file)))
        }
        None => None,
    };
    for _ in 0..cfg.iterations {
        let record = trainer.step()?;
        if let Some((path, w)) = &mut log {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        on_step(&record);
        if let Some(o) = &outputs {
            if cfg.checkpoint_every > 0 && record.step % cfg.checkpoint_every == 0 {
                save_checkpoint(&o.checkpoint_at(record.step), trainer.field(), config)?;
            }
        }
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(o) = &outputs {
        save_checkpoint(&o.final_checkpoint(), trainer.field(), config)?;
    }
    Ok(trainer.into_field())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Aabb, ClassSet};
    use crate::geometry::{Camera, Vec3};
    use crate::io::View;
    use crate::scenegen::SceneSpec;

    /// A small synthetic dataset with arbitrary (not physically rendered) supervision.
    fn toy_dataset(m: usize, views: usize, size: u32) -> Dataset {
        let names: Vec<String> = (0..m).map(|i| format!("c{i}")).collect();
        let spec_json = serde_json::json!({
            "name": "toy",
            "classes": names,
            "background_class": "c0",
            "primitives": [],
            "rig": {"radius": 2.0, "elevation_deg": 0, "count": views, "focal": size as f64, "val_every": 0},
            "image": {"width": size, "height": size},
            "t_near": 0.5,
            "t_far": 3.5,
            "bounds": {"min": [-1.0, -1.0, -1.0], "max": [1.0, 1.0, 1.0]}
        });
        let spec = SceneSpec::from_json(&spec_json.to_string()).unwrap();
        let class_set = ClassSet::new(names, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let views = (0..views)
            .map(|k| {
                let a = k as f64;
                let eye = Vec3::new(2.0 * a.cos(), 2.0 * a.sin(), 0.3);
                let camera = Camera::look_at(eye, Vec3::zeros(), Vec3::z(), size, size, size as f64, 0.5, 3.5).unwrap();
                let n = camera.pixel_count();
                let rgb = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
                let masks = (0..n)
                    .flat_map(|_| {
                        let hot = rng.gen_range(0..m);
                        (0..m).map(move |i| if i == hot { 0.9 } else { 0.1 / (m as f64) })
                    })
                    .collect();
                View { name: format!("{k:03}"), camera, rgb, masks }
            })
            .collect::<Vec<_>>();
        Dataset {
            spec,
            class_set,
            train: (0..views.len()).collect(),
            val: vec![],
            views,
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            rays_per_batch: 64,
            samples_per_ray: 24,
            resolution: [6, 6, 6],
            iterations: 10,
            deterministic: true,
            ..TrainConfig::default()
        }
    }

    /// Plain scalar Adam written independently of [`adam_update`].
    fn scalar_adam(p: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        let (mut p, mut m, mut v) = (p, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powf(t))) / ((v / (1.0 - b2.powf(t))).sqrt() + eps);
        }
        p
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 5;
        let history: Vec<Vec<f64>> = (0..100).map(|_| (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let start: Vec<f64> = (0..n).map(|i| i as f64 * 0.3 - 0.7).collect();
        let mut params = start.clone();
        let mut state = AdamState::new(n);
        for g in &history {
            adam_update(&mut params, g, &mut state, &cfg).unwrap();
        }
        for i in 0..n {
            let gi: Vec<f64> = history.iter().map(|g| g[i]).collect();
            let want = scalar_adam(start[i], &gi, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
            assert!((params[i] - want).abs() < 1e-10, "{i}: {} vs {want}", params[i]);
        }
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let cfg = TrainConfig::default();
        let mut p = vec![1.0, 1.0, 1.0];
        let mut s = AdamState::new(3);
        adam_update(&mut p, &[0.3, -7.0, 0.0], &mut s, &cfg).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-12);
        assert!((p[1] - 1.01).abs() < 1e-12);
        assert_eq!(p[2], 1.0);
        for _ in 0..50 {
            adam_update(&mut p, &[0.0; 3], &mut s, &cfg).unwrap();
        }
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn adam_refuses_non_finite_gradients() {
        let mut p = vec![0.0; 2];
        let mut s = AdamState::new(2);
        let err = adam_update(&mut p, &[1.0, f64::NAN], &mut s, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p, vec![0.0; 2]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn single_ray_batch() {
        let ds = toy_dataset(2, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_batch(&ds, &ds.train, 1, &mut rng).unwrap();
        assert_eq!(b.len(), 1);
        let view = &ds.views[b[0].view];
        assert_eq!(b[0].gt.color, view.rgb[b[0].pixel]);
        assert_eq!(b[0].gt.mask, view.mask_at(b[0].pixel, 2));
        assert!(sample_batch(&ds, &[], 1, &mut rng).is_err());
    }

    #[test]
    fn batches_repeat_under_a_fixed_seed() {
        let ds = toy_dataset(2, 3, 4);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..5).map(|_| sample_batch(&ds, &ds.train, 16, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pixel_frequencies_are_uniform() {
        let ds = toy_dataset(1, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for b in sample_batch(&ds, &ds.train, n, &mut rng).unwrap() {
            counts[b.pixel] += 1;
        }
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 3 degrees of freedom: the 0.999 quantile is 16.27.
        assert!(chi2 < 16.27, "chi2 {chi2}, counts {counts:?}");
        for c in counts {
            assert!((c as f64 / expected - 1.0).abs() < 0.05, "{counts:?}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let ds = toy_dataset(3, 2, 6);
        let cfg = TrainConfig { learning_rate: 0.0, ..small_cfg() };
        let mut t = Trainer::new(&ds, cfg).unwrap();
        let before = t.field().clone();
        let rec = t.step().unwrap();
        assert!(rec.total > 0.0);
        assert_eq!(t.field(), &before);
    }

    /// Total loss of a batch with midpoint stations and frozen recall weights, assembled
    /// from the public loss functions.
    fn batch_loss(field: &TrainedField, batch: &[BatchRay], cfg: &TrainConfig, recall: &crate::losses::RecallStats) -> f64 {
        let mut rays: Vec<RayWork> = batch.iter().map(|_| RayWork::default()).collect();
        for (b, w) in batch.iter().zip(&mut rays) {
            forward_ray(field, b, cfg, w).unwrap();
        }
        let outputs: Vec<RenderOutput> = rays.iter().map(|r| r.out.clone()).collect();
        let gts: Vec<GroundTruthRay> = batch.iter().map(|b| b.gt.clone()).collect();
        let (color, _) = color_loss(&outputs, &gts).unwrap();
        let (sem, _) = semantic_loss(&outputs, &gts, recall, &cfg.loss).unwrap();
        let samples: Vec<RaySamples> = rays.into_iter().map(|r| r.samples).collect();
        let (sparse, _) = crate::losses::sparsity_loss(&samples, &cfg.loss).unwrap();
        let (group, _) = crate::losses::group_sparsity_loss(&samples, &cfg.loss).unwrap();
        total_loss(color, sem, sparse, group, &cfg.loss).total
    }

    #[test]
    fn one_voxel_step_matches_hand_computed_adam_update() {
        let classes = ClassSet::new(vec!["a".into(), "b".into()], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut field = VoxelField::new([2, 2, 2], Aabb::cube(1.0), classes).unwrap();
        for p in field.params_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        let mut field = TrainedField::Layered(field);
        let ray = Ray::new(Vec3::new(-2.0, 0.1, -0.2), Vec3::new(1.0, 0.05, 0.1), 0.5, 3.5).unwrap();
        let batch = vec![BatchRay {
            view: 0,
            pixel: 0,
            ray,
            gt: GroundTruthRay { color: [0.9, 0.2, 0.4], mask: vec![0.3, 0.6] },
            jitter_seed: 0,
        }];
        let cfg = TrainConfig { stratified: false, samples_per_ray: 16, ..TrainConfig::default() };
        let start = params_mut(&mut field).to_vec();
        let recall = {
            let mut w = RayWork::default();
            forward_ray(&field, &batch[0], &cfg, &mut w).unwrap();
            instantaneous_recall(&[w.out], &[batch[0].gt.clone()]).unwrap()
        };

        // Oracle: central differences of the total loss, then one bias-corrected Adam step,
        // which moves each parameter by lr * g / (|g| + eps).
        let h = 1e-6;
        let fd: Vec<f64> = (0..start.len())
            .map(|i| {
                let mut f = field.clone();
                params_mut(&mut f)[i] = start[i] + h;
                let up = batch_loss(&f, &batch, &cfg, &recall);
                params_mut(&mut f)[i] = start[i] - h;
                let down = batch_loss(&f, &batch, &cfg, &recall);
                (up - down) / (2.0 * h)
            })
            .collect();

        let mut adam = AdamState::new(start.len());
        train_step(&mut field, &batch, &cfg, &mut adam, &mut StepWorkspace::default()).unwrap();
        let after = params_mut(&mut field).to_vec();
        let mut checked = 0;
        for i in 0..start.len() {
            if fd[i].abs() < 1e-5 {
                continue;
            }
            let want = start[i] - cfg.learning_rate * fd[i] / (fd[i].abs() + cfg.adam_eps);
            assert!((after[i] - want).abs() < 1e-12, "param {i}: {} vs {want}", after[i]);
            checked += 1;
        }
        assert!(checked >= 16, "only {checked} parameters had a usable gradient");
    }

    #[test]
    fn loss_decreases_over_training() {
        let ds = toy_dataset(2, 3, 8);
        let cfg = TrainConfig { rays_per_batch: 128, ..small_cfg() };
        let mut t = Trainer::new(&ds, cfg).unwrap();
        let losses: Vec<f64> = (0..200).map(|_| t.step().unwrap().total).collect();
        let avg: Vec<f64> = losses.chunks(50).map(|c| c.iter().sum::<f64>() / 50.0).collect();
        for w in avg.windows(2) {
            assert!(w[1] < w[0], "{avg:?}");
        }
    }

    #[test]
    fn runs_are_bit_identical() {
        let ds = toy_dataset(3, 2, 6);
        let run = || {
            let mut records = Vec::new();
            let f = train(&ds, &small_cfg(), None, &serde_json::Value::Null, |r| records.push(r.clone())).unwrap();
            (f, records)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra, rb);
        assert_eq!(
            crate::io::encode_checkpoint(&a, &serde_json::Value::Null),
            crate::io::encode_checkpoint(&b, &serde_json::Value::Null)
        );
    }

    #[test]
    fn chunked_reduction_matches_single_chunk_closely() {
        let ds = toy_dataset(2, 2, 6);
        let a = train(&ds, &small_cfg(), None, &serde_json::Value::Null, |_| {}).unwrap();
        let cfg = TrainConfig { grad_chunks: 4, ..small_cfg() };
        let b = train(&ds, &cfg, None, &serde_json::Value::Null, |_| {}).unwrap();
        for (x, y) in a.grid().data().iter().zip(b.grid().data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn extreme_parameters_stay_finite() {
        let ds = toy_dataset(3, 2, 6);
        for seed in 0..4 {
            let mut t = Trainer::new(&ds, TrainConfig { seed, ..small_cfg() }).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for p in params_mut(&mut t.field) {
                *p = rng.gen_range(-60.0..60.0);
            }
            for _ in 0..5 {
                t.step().unwrap();
            }
            assert!(t.field().grid().data().iter().all(|p| p.is_finite()));
        }
    }

    #[test]
    fn logit_mode_without_semantics_reproduces_single_class_training() {
        let ds = toy_dataset(1, 2, 6);
        let loss = LossConfig { lambda_sem: 0.0, ..LossConfig::default() };
        let ssd = TrainConfig { loss: loss.clone(), ..small_cfg() };
        let snerf = TrainConfig { mode: TrainMode::Snerf, ..ssd.clone() };
        let a = train(&ds, &ssd, None, &serde_json::Value::Null, |_| {}).unwrap();
        let b = train(&ds, &snerf, None, &serde_json::Value::Null, |_| {}).unwrap();
        let (pa, pb) = (a.grid().data(), b.grid().data());
        // Layered channels [σ, rgb]; logit channels [σ, rgb, logit].
        for v in 0..a.grid().vertex_count() {
            assert_eq!(&pa[v * 4..v * 4 + 4], &pb[v * 5..v * 5 + 4], "vertex {v}");
            assert_eq!(pb[v * 5 + 4], 0.0);
        }
    }

    #[test]
    fn logit_mode_learns_labels() {
        let ds = toy_dataset(2, 2, 6);
        let cfg = TrainConfig { mode: TrainMode::Snerf, ..small_cfg() };
        let mut t = Trainer::new(&ds, cfg).unwrap();
        let first = t.step().unwrap().sem;
        let mut last = first;
        for _ in 0..100 {
            last = t.step().unwrap().sem;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn writes_log_and_checkpoints() {
        let ds = toy_dataset(2, 2, 4);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { checkpoint_every: 4, ..small_cfg() };
        let cfg_json = serde_json::to_value(&cfg).unwrap();
        train(&ds, &cfg, Some(dir.path()), &cfg_json, |_| {}).unwrap();
        let out = TrainOutputs { dir: dir.path().to_path_buf() };
        let log = std::fs::read_to_string(out.log()).unwrap();
        assert_eq!(log.lines().count(), 10);
        let rec: StepRecord = serde_json::from_str(log.lines().last().unwrap()).unwrap();
        assert_eq!(rec.step, 10);
        assert!(out.checkpoint_at(4).exists() && out.checkpoint_at(8).exists());
        let (header, _) = crate::io::load_checkpoint(&out.final_checkpoint()).unwrap();
        assert_eq!(header.config, cfg_json);
    }
}
