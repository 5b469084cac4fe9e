//! Image PSNR and thresholded mean IoU of soft masks on held-out views.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Dataset, TrainedField};
use crate::render::render;

/// PSNR in dB, or the marker for a perfect reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Psnr {
    Db(f64),
    Exact(ExactMarker),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExactMarker {
    #[serde(rename = "exact")]
    Exact,
}

impl Psnr {
    pub const EXACT: Psnr = Psnr::Exact(ExactMarker::Exact);

    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Exact(_) => None,
        }
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.2} dB"),
            Psnr::Exact(_) => write!(f, "exact"),
        }
    }
}

pub fn mse(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "image sizes differ or are empty ({} vs {} pixels)",
            pred.len(),
            gt.len()
        )));
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * pred.len()) as f64)
}

/// `10 log10(peak² / MSE)` over every pixel and channel.
pub fn psnr(pred: &[[f64; 3]], gt: &[[f64; 3]], peak: f64) -> Result<Psnr> {
    let e = mse(pred, gt)?;
    Ok(if e == 0.0 {
        Psnr::EXACT
    } else {
        Psnr::Db(10.0 * (peak * peak / e).log10())
    })
}

/// Intersection and union pixel counts per class, accumulated over any number of images.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(m: usize) -> Self {
        IouCounts {
            intersection: vec![0; m],
            union: vec![0; m],
        }
    }

    /// Adds one image of soft masks laid out as `[pixel * m + class]`, hardened with
    /// `value >= threshold`.
    pub fn add(&mut self, pred: &[f64], gt: &[f64], threshold: f64) -> Result<()> {
        let m = self.intersection.len();
        if m == 0 || pred.len() != gt.len() || pred.len() % m != 0 {
            return Err(Error::invalid("mask shapes differ or do not match the class count"));
        }
        for (p, g) in pred.chunks_exact(m).zip(gt.chunks_exact(m)) {
            for i in 0..m {
                let (a, b) = (p[i] >= threshold, g[i] >= threshold);
                self.intersection[i] += (a && b) as u64;
                self.union[i] += (a || b) as u64;
            }
        }
        Ok(())
    }

    /// IoU per class; `None` where neither side has the class.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    /// Mean over classes present in either input; `None` if none is.
    pub fn mean(&self) -> Option<f64> {
        let present: Vec<f64> = self.per_class().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Per-class IoU and mean IoU of one image pair.
pub fn miou(pred: &[f64], gt: &[f64], m: usize, threshold: f64) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    let mut c = IouCounts::new(m);
    c.add(pred, gt, threshold)?;
    Ok((c.per_class(), c.mean()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub view: String,
    pub psnr: Psnr,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: String,
    /// Absent when the class appears in neither prediction nor ground truth.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub view_count: usize,
    pub views: Vec<ViewScore>,
    /// Mean of the per-view dB values; views reconstructed exactly are left out.
    pub mean_psnr: Psnr,
    /// IoU per class over all pixels of the split.
    pub per_class_iou: Vec<ClassIou>,
    pub miou: Option<f64>,
    pub threshold: f64,
    /// Whether the background class takes part in the mean IoU.
    pub background_included: bool,
}

/// Renders every view of `split` and scores it against the stored images and masks.
pub fn evaluate(field: &TrainedField, dataset: &Dataset, split: &str, samples_per_ray: usize) -> Result<EvalReport> {
    let indices = dataset.split(split)?;
    if indices.is_empty() {
        return Err(Error::invalid(format!("split {split:?} has no views")));
    }
    let m = dataset.m();
    if field.class_set().m() != m {
        return Err(Error::invalid("field and dataset have different class counts"));
    }
    let threshold = 0.5;
    let mut counts = IouCounts::new(m);
    let mut views = Vec::new();
    for &k in &indices {
        let view = &dataset.views[k];
        let frame = render(field, &view.camera, samples_per_ray)?;
        let pred_masks = frame.masks();
        counts.add(&pred_masks, &view.masks, threshold)?;
        views.push(ViewScore {
            view: view.name.clone(),
            psnr: psnr(&frame.colors(), &view.rgb, 1.0)?,
            miou: miou(&pred_masks, &view.masks, m, threshold)?.1,
        });
    }
    let finite: Vec<f64> = views.iter().filter_map(|v| v.psnr.db()).collect();
    let mean_psnr = if finite.is_empty() {
        Psnr::EXACT
    } else {
        Psnr::Db(finite.iter().sum::<f64>() / finite.len() as f64)
    };
    Ok(EvalReport {
        split: split.to_string(),
        view_count: views.len(),
        views,
        mean_psnr,
        per_class_iou: dataset
            .class_set
            .names()
            .iter()
            .zip(counts.per_class())
            .map(|(c, iou)| ClassIou { class: c.clone(), iou })
            .collect(),
        miou: counts.mean(),
        threshold,
        background_included: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_images_are_exact() {
        let img = vec![[0.2, 0.4, 0.6]; 5];
        assert_eq!(psnr(&img, &img, 1.0).unwrap(), Psnr::EXACT);
        assert_eq!(serde_json::to_string(&Psnr::EXACT).unwrap(), "\"exact\"");
        let back: Psnr = serde_json::from_str("\"exact\"").unwrap();
        assert_eq!(back, Psnr::EXACT);
        let db: Psnr = serde_json::from_str("31.5").unwrap();
        assert_eq!(db, Psnr::Db(31.5));
    }

    #[test]
    fn uniform_error_of_a_tenth_gives_twenty_db() {
        let a = vec![[0.5; 3]; 7];
        let b = vec![[0.6; 3]; 7];
        let v = psnr(&a, &b, 1.0).unwrap().db().unwrap();
        assert!((v - 20.0).abs() < 1e-9);
    }

    #[test]
    fn size_mismatch_is_an_error() {
        assert!(psnr(&[[0.0; 3]], &[[0.0; 3]; 2], 1.0).is_err());
        assert!(miou(&[0.0; 4], &[0.0; 6], 2, 0.5).is_err());
    }

    #[test]
    fn iou_reference_cases() {
        // Two classes over four pixels.
        let gt = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let (per, mean) = miou(&gt, &gt, 2, 0.5).unwrap();
        assert_eq!(per, vec![Some(1.0), Some(1.0)]);
        assert_eq!(mean, Some(1.0));

        let disjoint = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let (per, _) = miou(&disjoint, &gt, 2, 0.5).unwrap();
        assert_eq!(per[0], Some(0.0));

        let half = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let (per, _) = miou(&half, &gt, 2, 0.5).unwrap();
        assert_eq!(per[0], Some(0.5));
    }

    #[test]
    fn absent_classes_are_excluded_and_all_absent_is_undefined() {
        let gt = [1.0, 0.0, 1.0, 0.0];
        let (per, mean) = miou(&gt, &gt, 2, 0.5).unwrap();
        assert_eq!(per, vec![Some(1.0), None]);
        assert_eq!(mean, Some(1.0));
        let (_, mean) = miou(&[0.0; 4], &[0.1; 4], 2, 0.5).unwrap();
        assert_eq!(mean, None);
    }

    proptest! {
        #[test]
        fn psnr_decreases_with_error(base in 0.0f64..0.5, e1 in 1e-4f64..0.2, e2 in 1e-4f64..0.2) {
            prop_assume!((e1 - e2).abs() > 1e-9);
            let gt = vec![[base; 3]; 3];
            let p1 = psnr(&vec![[base + e1; 3]; 3], &gt, 1.0).unwrap().db().unwrap();
            let p2 = psnr(&vec![[base + e2; 3]; 3], &gt, 1.0).unwrap().db().unwrap();
            prop_assert_eq!(e1 < e2, p1 > p2);
        }

        #[test]
        fn psnr_ignores_channel_order(px in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..20)) {
            let a: Vec<[f64; 3]> = px.iter().map(|p| [p.0, p.1, p.2]).collect();
            let b: Vec<[f64; 3]> = px.iter().map(|p| [p.3, p.4, p.5]).collect();
            let rot = |v: &[[f64; 3]]| v.iter().map(|c| [c[2], c[0], c[1]]).collect::<Vec<_>>();
            let x = mse(&a, &b).unwrap();
            let y = mse(&rot(&a), &rot(&b)).unwrap();
            prop_assert!((x - y).abs() <= 1e-15 * x.max(1.0));
        }

        #[test]
        fn miou_is_symmetric_and_class_equivariant(
            masks in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..30)
        ) {
            let a: Vec<f64> = masks.iter().flat_map(|m| [m.0, m.1, m.2]).collect();
            let b: Vec<f64> = masks.iter().flat_map(|m| [m.3, m.4, m.5]).collect();
            let (pa, ma) = miou(&a, &b, 3, 0.5).unwrap();
            let (pb, mb) = miou(&b, &a, 3, 0.5).unwrap();
            prop_assert_eq!(&pa, &pb);
            prop_assert_eq!(ma, mb);
            let swap = |v: &[f64]| v.chunks(3).flat_map(|c| [c[2], c[0], c[1]]).collect::<Vec<_>>();
            let (ps, ms) = miou(&swap(&a), &swap(&b), 3, 0.5).unwrap();
            prop_assert_eq!(ps, vec![pa[2], pa[0], pa[1]]);
            prop_assert_eq!(ms.map(|v| (v * 1e12).round()), ma.map(|v| (v * 1e12).round()));
        }
    }
}
