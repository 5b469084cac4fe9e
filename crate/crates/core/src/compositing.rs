//! Front-to-back compositing kernels for layered samples and their analytic adjoints.
//!
//! A sample `j` with total density `σ_j = Σ_i σ^i_j` absorbs `α_j = 1 − exp(−σ_j δ_j)` of
//! the light reaching it. Its emitted color is the density-weighted mean of the class
//! colors, and class `i` owns the share `σ^i_j / σ_j` of the absorbed light, which is what
//! the soft semantic masks accumulate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::RaySamples;

/// Densities below this are treated as empty space when forming density ratios.
pub const SIGMA_EPS: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderOutput {
    pub color: [f64; 3],
    /// Soft mask per class; sums to `acc_alpha`.
    pub mask: Vec<f64>,
    /// Opacity-weighted expected sample distance (not normalized by `acc_alpha`).
    pub depth: f64,
    pub acc_alpha: f64,
}

impl RenderOutput {
    pub fn empty(m: usize) -> Self {
        RenderOutput {
            color: [0.0; 3],
            mask: vec![0.0; m],
            depth: 0.0,
            acc_alpha: 0.0,
        }
    }
}

/// Upstream gradients on every [`RenderOutput`] field.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrad {
    pub color: [f64; 3],
    pub mask: Vec<f64>,
    pub depth: f64,
    pub acc_alpha: f64,
}

impl RenderGrad {
    pub fn zeros(m: usize) -> Self {
        RenderGrad {
            color: [0.0; 3],
            mask: vec![0.0; m],
            depth: 0.0,
            acc_alpha: 0.0,
        }
    }
}

/// Gradients on the per-sample class densities and colors, laid out like [`RaySamples`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleGrads {
    pub d_sigma: Vec<f64>,
    pub d_color: Vec<[f64; 3]>,
}

#[inline]
fn opacity(optical_depth: f64) -> f64 {
    -(-optical_depth).exp_m1()
}

/// Sorts class indices by (density, color) so that sums over classes do not depend on
/// how the classes are numbered.
#[inline]
fn canonical_order(sigma: &[f64], color: &[[f64; 3]], order: &mut Vec<usize>) {
    order.clear();
    order.extend(0..sigma.len());
    if sigma.len() > 1 {
        order.sort_unstable_by(|&a, &b| {
            sigma[a]
                .total_cmp(&sigma[b])
                .then_with(|| color[a][0].total_cmp(&color[b][0]))
                .then_with(|| color[a][1].total_cmp(&color[b][1]))
                .then_with(|| color[a][2].total_cmp(&color[b][2]))
        });
    }
}

/// Total density of one sample, summed in a class-numbering independent order.
pub fn total_density(sigma: &[f64], color: &[[f64; 3]]) -> f64 {
    let mut order = Vec::with_capacity(sigma.len());
    canonical_order(sigma, color, &mut order);
    order.iter().map(|&i| sigma[i]).sum()
}

/// Transmittance before each sample followed by the transmittance after the last one,
/// so the result has `N + 1` entries and starts at 1.
pub fn transmittance(samples: &RaySamples) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.len() + 1);
    let mut order = Vec::with_capacity(samples.m);
    let mut t = 1.0;
    out.push(t);
    for j in 0..samples.len() {
        let sig = samples.sigma_at(j);
        canonical_order(sig, samples.color_at(j), &mut order);
        let sigma: f64 = order.iter().map(|&i| sig[i]).sum();
        t *= (-sigma * samples.delta[j]).exp();
        out.push(t);
    }
    out
}

/// Classic single-density compositing. Requires a one-class sample list.
pub fn composite_nerf(samples: &RaySamples) -> Result<RenderOutput> {
    if samples.m != 1 {
        return Err(Error::invalid(format!(
            "composite_nerf expects one class, got {}",
            samples.m
        )));
    }
    let mut out = RenderOutput::empty(1);
    let mut trans = 1.0;
    for j in 0..samples.len() {
        let a = samples.sigma[j] * samples.delta[j];
        let w = trans * opacity(a);
        let c = samples.color[j];
        for k in 0..3 {
            out.color[k] += w * c[k];
        }
        out.depth += w * samples.t[j];
        out.acc_alpha += w;
        trans *= (-a).exp();
    }
    out.mask[0] = out.acc_alpha;
    Ok(out)
}

/// Full layered render: color, soft masks, depth and accumulated opacity in one pass.
pub fn composite_full(samples: &RaySamples) -> RenderOutput {
    let m = samples.m;
    let mut out = RenderOutput::empty(m);
    let mut order = Vec::with_capacity(m);
    let mut trans = 1.0;
    for j in 0..samples.len() {
        let sig = samples.sigma_at(j);
        let col = samples.color_at(j);
        canonical_order(sig, col, &mut order);
        let total: f64 = order.iter().map(|&i| sig[i]).sum();
        let a = total * samples.delta[j];
        let w = trans * opacity(a);
        if total >= SIGMA_EPS {
            let mut mixed = [0.0; 3];
            for &i in &order {
                let r = sig[i] / total;
                for k in 0..3 {
                    mixed[k] += r * col[i][k];
                }
                out.mask[i] += w * r;
            }
            for k in 0..3 {
                out.color[k] += w * mixed[k];
            }
        }
        out.depth += w * samples.t[j];
        out.acc_alpha += w;
        trans *= (-a).exp();
    }
    out
}

/// Soft semantic masks only.
pub fn composite_semantic(samples: &RaySamples) -> Vec<f64> {
    composite_full(samples).mask
}

/// Renders class `i` alone, as if every other class were empty. The returned mask is
/// zero except for entry `i`, which holds the layer's opacity.
pub fn composite_layer(samples: &RaySamples, i: usize) -> Result<RenderOutput> {
    let single = composite_nerf(&samples.class_view(i)?)?;
    let mut mask = vec![0.0; samples.m];
    mask[i] = single.acc_alpha;
    Ok(RenderOutput { mask, ..single })
}

/// Reusable buffers for [`composite_backward_into`].
#[derive(Clone, Debug, Default)]
pub struct BackwardScratch {
    trans: Vec<f64>,
    weight: Vec<f64>,
    value: Vec<f64>,
    mixed: Vec<[f64; 3]>,
}

pub fn composite_backward(samples: &RaySamples, upstream: &RenderGrad) -> SampleGrads {
    let mut grads = SampleGrads::default();
    composite_backward_into(samples, upstream, &mut grads, &mut BackwardScratch::default());
    grads
}

/// Exact gradient of `<upstream, composite_full(samples)>` with respect to every class
/// density and color.
///
/// With `G_j` the upstream projected onto sample `j`'s emitted values (color, mask ratios,
/// distance, 1), the optical depth `a_j = σ_j δ_j` receives `T_{j+1} G_j − Σ_{k>j} w_k G_k`,
/// and the density ratios add a quotient-rule term scaled by `w_j / σ_j`.
pub fn composite_backward_into(
    samples: &RaySamples,
    upstream: &RenderGrad,
    grads: &mut SampleGrads,
    scratch: &mut BackwardScratch,
) {
    let m = samples.m;
    let n = samples.len();
    grads.d_sigma.clear();
    grads.d_sigma.resize(n * m, 0.0);
    grads.d_color.clear();
    grads.d_color.resize(n * m, [0.0; 3]);
    let BackwardScratch {
        trans,
        weight,
        value,
        mixed,
    } = scratch;
    trans.clear();
    weight.clear();
    value.clear();
    mixed.clear();

    let g_c = upstream.color;
    let g_s = &upstream.mask;
    let mut t_cur = 1.0;
    for j in 0..n {
        let sig = samples.sigma_at(j);
        let col = samples.color_at(j);
        let total: f64 = sig.iter().sum();
        let a = total * samples.delta[j];
        let w = t_cur * opacity(a);
        let mut mix = [0.0; 3];
        let mut g = 0.0;
        if total >= SIGMA_EPS {
            for i in 0..m {
                let r = sig[i] / total;
                for k in 0..3 {
                    mix[k] += r * col[i][k];
                }
            }
            g = g_c[0] * mix[0] + g_c[1] * mix[1] + g_c[2] * mix[2];
            for i in 0..m {
                g += g_s[i] * (sig[i] / total);
            }
        }
        g += upstream.depth * samples.t[j];
        g += upstream.acc_alpha;
        trans.push(t_cur);
        weight.push(w);
        value.push(g);
        mixed.push(mix);
        t_cur *= (-a).exp();
    }

    let mut suffix = 0.0;
    for j in (0..n).rev() {
        let sig = samples.sigma_at(j);
        let col = samples.color_at(j);
        let total: f64 = sig.iter().sum();
        let delta = samples.delta[j];
        let t_next = trans[j] * (-total * delta).exp();
        let d_depth = t_next * value[j] - suffix;
        let w = weight[j];
        if total >= SIGMA_EPS {
            let mix = mixed[j];
            let mask_mean: f64 = (0..m).map(|l| g_s[l] * (sig[l] / total)).sum();
            let scale = w / total;
            for i in 0..m {
                let r = sig[i] / total;
                let ratio_term = g_c[0] * (col[i][0] - mix[0])
                    + g_c[1] * (col[i][1] - mix[1])
                    + g_c[2] * (col[i][2] - mix[2])
                    + (g_s[i] - mask_mean);
                grads.d_sigma[j * m + i] = delta * d_depth + scale * ratio_term;
                let wr = w * r;
                grads.d_color[j * m + i] = [wr * g_c[0], wr * g_c[1], wr * g_c[2]];
            }
        } else {
            for i in 0..m {
                grads.d_sigma[j * m + i] = delta * d_depth;
            }
        }
        suffix += w * value[j];
    }
}

/// Single-density compositing of `k` arbitrary channels per sample (`values[j * k + c]`).
/// Returns the composited channels, depth and accumulated opacity.
pub fn composite_channels(t: &[f64], delta: &[f64], sigma: &[f64], values: &[f64], k: usize) -> (Vec<f64>, f64, f64) {
    let mut out = vec![0.0; k];
    let mut depth = 0.0;
    let mut acc = 0.0;
    let mut trans = 1.0;
    for j in 0..sigma.len() {
        let a = sigma[j] * delta[j];
        let w = trans * opacity(a);
        for c in 0..k {
            out[c] += w * values[j * k + c];
        }
        depth += w * t[j];
        acc += w;
        trans *= (-a).exp();
    }
    (out, depth, acc)
}

/// Adjoint of [`composite_channels`]. Writes per-sample density gradients into `d_sigma`
/// and channel gradients into `d_values`.
#[allow(clippy::too_many_arguments)]
pub fn composite_channels_backward(
    t: &[f64],
    delta: &[f64],
    sigma: &[f64],
    values: &[f64],
    k: usize,
    g_out: &[f64],
    g_depth: f64,
    g_acc: f64,
    d_sigma: &mut Vec<f64>,
    d_values: &mut Vec<f64>,
    scratch: &mut BackwardScratch,
) {
    let n = sigma.len();
    d_sigma.clear();
    d_sigma.resize(n, 0.0);
    d_values.clear();
    d_values.resize(n * k, 0.0);
    scratch.trans.clear();
    scratch.weight.clear();
    scratch.value.clear();
    let mut t_cur = 1.0;
    for j in 0..n {
        let a = sigma[j] * delta[j];
        let w = t_cur * opacity(a);
        let mut g = 0.0;
        for c in 0..k {
            g += g_out[c] * values[j * k + c];
        }
        g += g_depth * t[j];
        g += g_acc;
        scratch.trans.push(t_cur);
        scratch.weight.push(w);
        scratch.value.push(g);
        t_cur *= (-a).exp();
    }
    let mut suffix = 0.0;
    for j in (0..n).rev() {
        let t_next = scratch.trans[j] * (-sigma[j] * delta[j]).exp();
        d_sigma[j] = delta[j] * (t_next * scratch.value[j] - suffix);
        let w = scratch.weight[j];
        for c in 0..k {
            d_values[j * k + c] = w * g_out[c];
        }
        suffix += w * scratch.value[j];
    }
}

/// One sample of a single-density field carrying class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SnerfSample {
    pub t: f64,
    pub delta: f64,
    pub sigma: f64,
    pub color: [f64; 3],
    pub p: Vec<f64>,
}

/// Layer `i` of a single-density field, obtained by scaling the density with the class
/// probability `p^i` at every sample.
pub fn composite_snerf_layer(samples: &[SnerfSample], i: usize) -> Result<RenderOutput> {
    let m = samples.first().map_or(0, |s| s.p.len());
    if i >= m.max(1) || samples.iter().any(|s| s.p.len() != m) {
        return Err(Error::invalid(format!("class {i} out of range for {m} classes")));
    }
    let t: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let delta: Vec<f64> = samples.iter().map(|s| s.delta).collect();
    let sigma: Vec<f64> = samples.iter().map(|s| s.p[i] * s.sigma).collect();
    let values: Vec<f64> = samples.iter().flat_map(|s| s.color).collect();
    let (color, depth, acc) = composite_channels(&t, &delta, &sigma, &values, 3);
    let mut mask = vec![0.0; m];
    mask[i] = acc;
    Ok(RenderOutput {
        color: [color[0], color[1], color[2]],
        mask,
        depth,
        acc_alpha: acc,
    })
}
