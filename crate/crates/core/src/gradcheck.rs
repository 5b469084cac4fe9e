//! Finite-difference checks of every hand-written gradient: compositing, the four losses
//! and the field adjoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compositing::{
    composite_backward, composite_channels, composite_channels_backward, composite_full, BackwardScratch,
    RenderGrad, RenderOutput,
};
use crate::field::{Aabb, ClassSet, RaySamples, VoxelField};
use crate::geometry::Vec3;
use crate::losses::{
    color_loss, group_sparsity_loss, instantaneous_recall, semantic_loss, sparsity_loss, GroundTruthRay, LossConfig,
    RecallStats,
};

/// Central difference step on sample densities and colors.
pub const SAMPLE_STEP: f64 = 1e-4;

/// Central difference step on raw grid parameters.
pub const PARAM_STEP: f64 = 1e-3;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    pub entries_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub suites: Vec<SuiteResult>,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

#[derive(Default)]
struct Tally {
    entries: usize,
    max: f64,
}

impl Tally {
    fn add(&mut self, analytic: f64, numeric: f64) {
        self.entries += 1;
        let e = relative_error(analytic, numeric);
        if !(e <= self.max) {
            self.max = e;
        }
    }
}

/// Compares `grad` with central differences of `f` at `x`.
fn check_vector(x: &[f64], grad: &[f64], step: f64, f: &mut dyn FnMut(&[f64]) -> f64, tally: &mut Tally) {
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        tally.add(grad[i], (up - down) / (2.0 * step));
    }
}

fn random_samples(rng: &mut ChaCha8Rng, m: usize, n: usize) -> RaySamples {
    let mut s = RaySamples::with_classes(m);
    let mut t = rng.gen_range(0.1..1.0);
    for _ in 0..n {
        let delta = rng.gen_range(0.05..0.5);
        let sigma: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..3.0)).collect();
        let color: Vec<[f64; 3]> = (0..m)
            .map(|_| [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)])
            .collect();
        s.push(t, delta, &sigma, &color).expect("valid sample");
        t += delta;
    }
    s
}

fn with_params(base: &RaySamples, sigma: &[f64], color: &[f64]) -> RaySamples {
    let mut s = base.clone();
    s.sigma.copy_from_slice(sigma);
    for (c, v) in s.color.iter_mut().zip(color.chunks_exact(3)) {
        *c = [v[0], v[1], v[2]];
    }
    s
}

fn dot_output(out: &RenderOutput, g: &RenderGrad) -> f64 {
    let mut v = g.depth * out.depth + g.acc_alpha * out.acc_alpha;
    for k in 0..3 {
        v += g.color[k] * out.color[k];
    }
    v + g.mask.iter().zip(&out.mask).map(|(a, b)| a * b).sum::<f64>()
}

fn random_upstream(rng: &mut ChaCha8Rng, m: usize) -> RenderGrad {
    RenderGrad {
        color: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        mask: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        depth: rng.gen_range(-0.3..0.3),
        acc_alpha: rng.gen_range(-1.0..1.0),
    }
}

fn shape(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=16))
}

fn compositing_suite(rng: &mut ChaCha8Rng, instances: usize) -> SuiteResult {
    let mut tally = Tally::default();
    for _ in 0..instances {
        let (m, n) = shape(rng);
        let base = random_samples(rng, m, n);
        let up = random_upstream(rng, m);
        let g = composite_backward(&base, &up);
        let color: Vec<f64> = base.color.iter().flatten().copied().collect();
        check_vector(&base.sigma, &g.d_sigma, SAMPLE_STEP, &mut |x| dot_output(&composite_full(&with_params(&base, x, &color)), &up), &mut tally);
        let dc: Vec<f64> = g.d_color.iter().flatten().copied().collect();
        check_vector(&color, &dc, SAMPLE_STEP, &mut |x| dot_output(&composite_full(&with_params(&base, &base.sigma, x)), &up), &mut tally);
    }
    SuiteResult {
        name: "compositing".into(),
        instances,
        entries_checked: tally.entries,
        max_rel_error: tally.max,
    }
}

fn channels_suite(rng: &mut ChaCha8Rng, instances: usize) -> SuiteResult {
    let mut tally = Tally::default();
    let mut scratch = BackwardScratch::default();
    for _ in 0..instances {
        let (k, n) = shape(rng);
        let s = random_samples(rng, 1, n);
        let values: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g_out: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (g_depth, g_acc) = (rng.gen_range(-0.3..0.3), rng.gen_range(-1.0..1.0));
        let loss = |sigma: &[f64], values: &[f64]| {
            let (out, depth, acc) = composite_channels(&s.t, &s.delta, sigma, values, k);
            out.iter().zip(&g_out).map(|(a, b)| a * b).sum::<f64>() + g_depth * depth + g_acc * acc
        };
        let (mut ds, mut dv) = (Vec::new(), Vec::new());
        composite_channels_backward(&s.t, &s.delta, &s.sigma, &values, k, &g_out, g_depth, g_acc, &mut ds, &mut dv, &mut scratch);
        check_vector(&s.sigma, &ds, SAMPLE_STEP, &mut |x| loss(x, &values), &mut tally);
        check_vector(&values, &dv, SAMPLE_STEP, &mut |x| loss(&s.sigma, x), &mut tally);
    }
    SuiteResult {
        name: "channel compositing".into(),
        instances,
        entries_checked: tally.entries,
        max_rel_error: tally.max,
    }
}

fn random_gt(rng: &mut ChaCha8Rng, m: usize) -> GroundTruthRay {
    let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
    let total: f64 = raw.iter().sum::<f64>() / rng.gen_range(0.6..1.0);
    GroundTruthRay {
        color: [rng.gen(), rng.gen(), rng.gen()],
        mask: raw.iter().map(|v| v / total).collect(),
    }
}

/// Color and semantic losses through compositing, and both opacity penalties, with
/// respect to the sample densities and colors of a small batch.
fn losses_suite(rng: &mut ChaCha8Rng, instances: usize) -> SuiteResult {
    let mut tally = Tally::default();
    let cfg = LossConfig::default();
    for _ in 0..instances {
        let (m, n) = shape(rng);
        let rays = rng.gen_range(1..=3);
        let batch: Vec<RaySamples> = (0..rays).map(|_| random_samples(rng, m, n)).collect();
        let gts: Vec<GroundTruthRay> = (0..rays).map(|_| random_gt(rng, m)).collect();
        let outputs: Vec<RenderOutput> = batch.iter().map(composite_full).collect();
        let recall = instantaneous_recall(&outputs, &gts).expect("batch");

        // Recall weights are held at their current values.
        let supervised = |batch: &[RaySamples], recall: &RecallStats| {
            let outs: Vec<RenderOutput> = batch.iter().map(composite_full).collect();
            let (c, _) = color_loss(&outs, &gts).expect("batch");
            let (s, _) = semantic_loss(&outs, &gts, recall, &cfg).expect("batch");
            c + cfg.lambda_sem * s
        };
        let (_, g_color) = color_loss(&outputs, &gts).expect("batch");
        let (_, g_sem) = semantic_loss(&outputs, &gts, &recall, &cfg).expect("batch");
        let (_, g_sparse) = sparsity_loss(&batch, &cfg).expect("batch");
        let (_, g_group) = group_sparsity_loss(&batch, &cfg).expect("batch");

        for r in 0..rays {
            let up = RenderGrad {
                color: g_color[r],
                mask: g_sem[r].iter().map(|g| cfg.lambda_sem * g).collect(),
                depth: 0.0,
                acc_alpha: 0.0,
            };
            let g = composite_backward(&batch[r], &up);
            let color: Vec<f64> = batch[r].color.iter().flatten().copied().collect();
            let replace = |sigma: &[f64], color: &[f64]| {
                let mut b = batch.clone();
                b[r] = with_params(&batch[r], sigma, color);
                b
            };
            check_vector(&batch[r].sigma, &g.d_sigma, SAMPLE_STEP, &mut |x| supervised(&replace(x, &color), &recall), &mut tally);
            let dc: Vec<f64> = g.d_color.iter().flatten().copied().collect();
            check_vector(&color, &dc, SAMPLE_STEP, &mut |x| supervised(&replace(&batch[r].sigma, x), &recall), &mut tally);
            check_vector(
                &batch[r].sigma,
                &g_sparse[r],
                SAMPLE_STEP,
                &mut |x| sparsity_loss(&replace(x, &color), &cfg).expect("batch").0,
                &mut tally,
            );
            check_vector(
                &batch[r].sigma,
                &g_group[r],
                SAMPLE_STEP,
                &mut |x| group_sparsity_loss(&replace(x, &color), &cfg).expect("batch").0,
                &mut tally,
            );
        }
    }
    SuiteResult {
        name: "losses".into(),
        instances,
        entries_checked: tally.entries,
        max_rel_error: tally.max,
    }
}

/// `<upstream, field(x)>` against the parameters, at random points of random small grids.
fn field_suite(rng: &mut ChaCha8Rng, instances: usize) -> SuiteResult {
    let mut tally = Tally::default();
    for _ in 0..instances {
        let m = rng.gen_range(1..=4);
        let classes = ClassSet::new((0..m).map(|i| format!("c{i}")).collect(), 0).expect("classes");
        let res = [rng.gen_range(2..=4), rng.gen_range(2..=4), rng.gen_range(2..=4)];
        let bounds = Aabb { min: [-1.0, -0.7, -0.4], max: [0.8, 1.1, 0.9] };
        let mut field = VoxelField::new(res, bounds, classes).expect("field");
        for p in field.params_mut() {
            *p = rng.gen_range(-2.5..2.5);
        }
        let x = Vec3::from_fn(|a, _| rng.gen_range(bounds.min[a]..bounds.max[a]));
        let d = Vec3::new(0.0, 0.0, 1.0);
        let d_sigma: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d_color: Vec<[f64; 3]> = (0..m).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let mut grads = vec![0.0; field.params().len()];
        field.query_grad(&x, &d, &d_sigma, &d_color, &mut grads).expect("query");
        let params = field.params().to_vec();
        let mut probe = field.clone();
        check_vector(
            &params,
            &grads,
            PARAM_STEP,
            &mut |p| {
                probe.params_mut().copy_from_slice(p);
                let (s, c) = probe.query(&x, &d).expect("query");
                (0..m)
                    .map(|i| d_sigma[i] * s[i] + (0..3).map(|k| d_color[i][k] * c[i][k]).sum::<f64>())
                    .sum()
            },
            &mut tally,
        );
    }
    SuiteResult {
        name: "field".into(),
        instances,
        entries_checked: tally.entries,
        max_rel_error: tally.max,
    }
}

/// Runs every suite with `instances` random instances each.
pub fn run_gradient_checks(seed: u64, instances: usize) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let suites = vec![
        compositing_suite(&mut rng, instances),
        channels_suite(&mut rng, instances),
        losses_suite(&mut rng, instances),
        field_suite(&mut rng, instances),
    ];
    let max_rel_error = suites.iter().map(|s| s.max_rel_error).fold(0.0, f64::max);
    GradCheckReport {
        seed,
        suites,
        max_rel_error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_on_a_few_instances() {
        let r = run_gradient_checks(7, 10);
        for s in &r.suites {
            assert!(s.entries_checked > 0, "{}", s.name);
            assert!(s.max_rel_error < 1e-4, "{}: {}", s.name, s.max_rel_error);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut tally = Tally::default();
        check_vector(&[1.0, 2.0], &[2.0, 4.5], SAMPLE_STEP, &mut |x| x[0] * x[0] + x[1] * x[1], &mut tally);
        assert!(tally.max > 0.1);
    }
}
