//! Training objectives: color reconstruction, recall-weighted robust semantic loss,
//! per-layer opacity sparsity and cross-layer group sparsity.

use serde::{Deserialize, Serialize};

use crate::compositing::RenderOutput;
use crate::error::{Error, Result};
use crate::field::RaySamples;

/// How opacity regularizers are reduced over the rays of a batch. Samples and classes
/// are always summed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RayReduction {
    Mean,
    #[default]
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_sem: f64,
    pub lambda_sparse: f64,
    pub lambda_group: f64,
    pub gamma_sem: f64,
    /// Shared by sparsity and group sparsity.
    pub gamma_sparse: f64,
    /// Floor on |x| when differentiating |x|^γ.
    pub eps_pow: f64,
    pub opacity_reduction: RayReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_sem: 1e-1,
            lambda_sparse: 1e-3,
            lambda_group: 1e-3,
            gamma_sem: 1.0,
            gamma_sparse: 0.8,
            eps_pow: 1e-4,
            opacity_reduction: RayReduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_sem, self.lambda_sparse, self.lambda_group];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if !(self.gamma_sparse > 0.0 && self.gamma_sparse <= 1.0) {
            return Err(Error::invalid("gamma_sparse must lie in (0, 1]"));
        }
        if !(self.gamma_sem > 0.0 && self.gamma_sem <= 1.0) {
            return Err(Error::invalid("gamma_sem must lie in (0, 1]"));
        }
        if !(self.eps_pow > 0.0) {
            return Err(Error::invalid("eps_pow must be positive"));
        }
        Ok(())
    }

    /// Factor applied to per-ray opacity penalties for a batch of `rays` rays.
    pub fn ray_scale(&self, rays: usize) -> f64 {
        match self.opacity_reduction {
            RayReduction::Mean => 1.0 / rays as f64,
            RayReduction::Sum => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRay {
    pub color: [f64; 3],
    pub mask: Vec<f64>,
}

impl GroundTruthRay {
    /// Class with the largest ground-truth share, if any share is positive. Ties go to
    /// the lower index.
    pub fn label(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &v) in self.mask.iter().enumerate() {
            if v > 0.0 && best.is_none_or(|b| v > self.mask[b]) {
                best = Some(i);
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallStats {
    pub tp: Vec<f64>,
    pub p: Vec<f64>,
    pub recall: Vec<f64>,
}

impl RecallStats {
    /// Per-class semantic weight `1 − R^i`.
    pub fn weight(&self, class: usize) -> f64 {
        1.0 - self.recall[class]
    }
}

/// Unweighted loss terms and their weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub color: f64,
    pub sem: f64,
    pub sparse: f64,
    pub group: f64,
}

fn check_batch(outputs: &[RenderOutput], gt: &[GroundTruthRay]) -> Result<()> {
    if outputs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if outputs.len() != gt.len() {
        return Err(Error::invalid(format!(
            "{} renders but {} ground-truth rays",
            outputs.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// `Σ_r ‖C − Ĉ‖²` and its gradient `2 (C − Ĉ)` per ray.
pub fn color_loss(outputs: &[RenderOutput], gt: &[GroundTruthRay]) -> Result<(f64, Vec<[f64; 3]>)> {
    check_batch(outputs, gt)?;
    let mut total = 0.0;
    let grads = outputs
        .iter()
        .zip(gt)
        .map(|(o, g)| {
            let mut d = [0.0; 3];
            for k in 0..3 {
                let e = o.color[k] - g.color[k];
                total += e * e;
                d[k] = 2.0 * e;
            }
            d
        })
        .collect();
    Ok((total, grads))
}

/// Batch recall per class. Positives of class `i` are the rays whose ground-truth mask
/// peaks at `i`; true-positive mass is the predicted soft mask of `i` on those rays.
/// Classes without positives get recall 1.
pub fn instantaneous_recall(outputs: &[RenderOutput], gt: &[GroundTruthRay]) -> Result<RecallStats> {
    check_batch(outputs, gt)?;
    let m = outputs[0].mask.len();
    let mut tp = vec![0.0; m];
    let mut p = vec![0.0; m];
    for (o, g) in outputs.iter().zip(gt) {
        if o.mask.len() != m || g.mask.len() != m {
            return Err(Error::invalid("mask class counts disagree within the batch"));
        }
        if let Some(label) = g.label() {
            p[label] += 1.0;
            tp[label] += o.mask[label];
        }
    }
    let recall = tp
        .iter()
        .zip(&p)
        .map(|(&t, &n)| if n > 0.0 { (t / n).clamp(0.0, 1.0) } else { 1.0 })
        .collect();
    Ok(RecallStats { tp, p, recall })
}

/// `|x|^γ` gradient with |x| floored at `eps`.
#[inline]
fn pow_slope(x: f64, gamma: f64, eps: f64) -> f64 {
    if gamma == 1.0 {
        return if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    if x == 0.0 {
        return 0.0;
    }
    x.signum() * gamma * x.abs().max(eps).powf(gamma - 1.0)
}

/// `Σ_r Σ_i (1 − R^i) |S^i − Ŝ^i|^γ` with gradients on every predicted mask entry.
/// Recall weights are constants.
pub fn semantic_loss(
    outputs: &[RenderOutput],
    gt: &[GroundTruthRay],
    recall: &RecallStats,
    cfg: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_batch(outputs, gt)?;
    let gamma = cfg.gamma_sem;
    let mut total = 0.0;
    let grads = outputs
        .iter()
        .zip(gt)
        .map(|(o, g)| {
            o.mask
                .iter()
                .zip(&g.mask)
                .enumerate()
                .map(|(i, (&s, &s_hat))| {
                    let w = recall.weight(i);
                    let d = s - s_hat;
                    total += w * d.abs().powf(gamma);
                    w * pow_slope(d, gamma, cfg.eps_pow)
                })
                .collect()
        })
        .collect();
    Ok((total, grads))
}

/// Which opacity regularizer to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpacityPenalty {
    /// `|α|^γ + |1 − α|^γ`, minimal at fully empty or fully opaque samples.
    Sparsity,
    /// `|α|^γ`, summed over classes, favoring one dominant class per sample.
    Group,
}

/// Both opacity penalties of one ray in a single pass. Adds
/// `sparse_scale * ∇sparsity + group_scale * ∇group` (with respect to each class density)
/// into `d_sigma` and returns the unscaled `(sparsity, group)` values.
pub fn opacity_penalties_ray(
    samples: &RaySamples,
    gamma: f64,
    eps: f64,
    sparse_scale: f64,
    group_scale: f64,
    d_sigma: &mut [f64],
) -> (f64, f64) {
    let m = samples.m;
    let floor_slope = gamma * eps.powf(gamma - 1.0);
    // Slope of x^γ from x and x^γ, with the floor below eps.
    let slope = |x: f64, x_pow: f64| {
        if x >= eps {
            gamma * x_pow / x
        } else if x > 0.0 {
            floor_slope
        } else {
            0.0
        }
    };
    let grads = sparse_scale != 0.0 || group_scale != 0.0;
    let (mut sparse, mut group) = (0.0, 0.0);
    for j in 0..samples.len() {
        let delta = samples.delta[j];
        for i in 0..m {
            let a = samples.sigma[j * m + i] * delta;
            let clear = (-a).exp();
            let alpha = -(-a).exp_m1();
            let alpha_pow = if alpha > 0.0 { (gamma * alpha.ln()).exp() } else { 0.0 };
            let clear_pow = (-gamma * a).exp();
            sparse += alpha_pow + clear_pow;
            group += alpha_pow;
            if grads {
                let s_alpha = slope(alpha, alpha_pow);
                let s_clear = slope(clear, clear_pow);
                d_sigma[j * m + i] += (sparse_scale * (s_alpha - s_clear) + group_scale * s_alpha) * delta * clear;
            }
        }
    }
    (sparse, group)
}

/// One of the two opacity penalties of a ray; see [`opacity_penalties_ray`].
pub fn opacity_penalty_ray(
    samples: &RaySamples,
    penalty: OpacityPenalty,
    gamma: f64,
    eps: f64,
    scale: f64,
    d_sigma: &mut [f64],
) -> f64 {
    match penalty {
        OpacityPenalty::Sparsity => opacity_penalties_ray(samples, gamma, eps, scale, 0.0, d_sigma).0,
        OpacityPenalty::Group => opacity_penalties_ray(samples, gamma, eps, 0.0, scale, d_sigma).1,
    }
}

fn opacity_penalty(batch: &[RaySamples], penalty: OpacityPenalty, cfg: &LossConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = cfg.ray_scale(batch.len());
    let mut total = 0.0;
    let grads = batch
        .iter()
        .map(|s| {
            let mut g = vec![0.0; s.sigma.len()];
            total += opacity_penalty_ray(s, penalty, cfg.gamma_sparse, cfg.eps_pow, scale, &mut g);
            g
        })
        .collect();
    Ok((total * scale, grads))
}

/// Opacity sparsity over every class, sample and ray, with gradients on the class densities.
pub fn sparsity_loss(batch: &[RaySamples], cfg: &LossConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    opacity_penalty(batch, OpacityPenalty::Sparsity, cfg)
}

/// Group sparsity `Σ |α^i_j|^γ`, with gradients on the class densities.
pub fn group_sparsity_loss(batch: &[RaySamples], cfg: &LossConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    opacity_penalty(batch, OpacityPenalty::Group, cfg)
}

/// Weighted sum of the four terms.
pub fn total_loss(color: f64, sem: f64, sparse: f64, group: f64, cfg: &LossConfig) -> LossReport {
    LossReport {
        total: color + cfg.lambda_sem * sem + cfg.lambda_sparse * sparse + cfg.lambda_group * group,
        color,
        sem,
        sparse,
        group,
    }
}
