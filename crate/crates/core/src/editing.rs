//! Edits of a trained layered field: per-class recoloring, rigid motion and removal, plus
//! dolly-zoom camera paths.
//!
//! A moved class is looked up a second time along each ray, at the inverse-transformed
//! positions of the same sample stations; every other class keeps its original samples.
//! Space the moved class uncovers was never observed and renders as whatever the field
//! holds there.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};

use crate::compositing::composite_full;
use crate::error::{Error, Result};
use crate::field::{ClassSet, VoxelField};
use crate::geometry::{midpoint, sample_distances, Camera, Vec3};
use crate::render::{render_pixels, Frame, RayScratch};

fn identity3() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

/// `c' = clamp(matrix · c + offset, 0, 1)` on activated colors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorTransform {
    #[serde(default = "identity3")]
    pub matrix: [[f64; 3]; 3],
    #[serde(default)]
    pub offset: [f64; 3],
}

/// `x' = R (x − pivot) + pivot + translation`. The rotation is either an explicit
/// orthonormal matrix or XYZ Euler angles in degrees.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidTransform {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[[f64; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_deg: Option<[f64; 3]>,
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub pivot: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEdit {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<ColorTransform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<RigidTransform>,
    #[serde(default)]
    pub remove: bool,
}

/// Edit file contents: one entry per edited class, keyed by class name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EditSpec {
    pub classes: BTreeMap<String, ClassEdit>,
}

impl EditSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("edit spec: {e}")))
    }
}

/// Affine map `x ↦ a x + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub a: Matrix3<f64>,
    pub b: Vec3,
}

impl Affine {
    pub fn identity() -> Self {
        Affine {
            a: Matrix3::identity(),
            b: Vec3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.a * x + self.b
    }

    /// `other ∘ self`: apply `self` first.
    pub fn then(&self, other: &Affine) -> Affine {
        Affine {
            a: other.a * self.a,
            b: other.a * self.b + other.b,
        }
    }
}

/// Per-class edit resolved against a class set.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedClassEdit {
    pub color: Option<Affine>,
    /// World-from-edited map: where an edited-space point was in the original field.
    pub inverse_motion: Option<Affine>,
    pub remove: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedEdit {
    pub classes: Vec<ResolvedClassEdit>,
}

fn rotation_of(t: &RigidTransform, path: &str) -> Result<Matrix3<f64>> {
    match (t.rotation, t.rotation_deg) {
        (Some(_), Some(_)) => Err(Error::invalid(format!("{path}: give rotation or rotation_deg, not both"))),
        (Some(r), None) => {
            let m = Matrix3::from_fn(|i, j| r[i][j]);
            let err = (m.transpose() * m - Matrix3::identity()).abs().max();
            if !(err < 1e-9) || !(m.determinant() > 0.0) {
                return Err(Error::invalid(format!("{path}.rotation is not a proper orthonormal matrix")));
            }
            Ok(m)
        }
        (None, Some(deg)) => {
            if deg.iter().any(|d| !d.is_finite()) {
                return Err(Error::invalid(format!("{path}.rotation_deg must be finite")));
            }
            let [x, y, z] = deg.map(f64::to_radians);
            Ok(*Rotation3::from_euler_angles(x, y, z).matrix())
        }
        (None, None) => Ok(Matrix3::identity()),
    }
}

impl ResolvedEdit {
    pub fn identity(m: usize) -> Self {
        ResolvedEdit {
            classes: vec![
                ResolvedClassEdit {
                    color: None,
                    inverse_motion: None,
                    remove: false,
                };
                m
            ],
        }
    }

    pub fn resolve(spec: &EditSpec, classes: &ClassSet) -> Result<Self> {
        let mut out = ResolvedEdit::identity(classes.m());
        for (name, edit) in &spec.classes {
            let i = classes
                .index_of(name)
                .ok_or_else(|| Error::invalid(format!("edit names unknown class {name:?}")))?;
            let path = name.to_string();
            let slot = &mut out.classes[i];
            slot.remove = edit.remove;
            if let Some(c) = &edit.color {
                let a = Matrix3::from_fn(|r, k| c.matrix[r][k]);
                if a.iter().chain(&c.offset).any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("{path}.color must be finite")));
                }
                slot.color = Some(Affine { a, b: Vec3::from(c.offset) });
            }
            if let Some(t) = &edit.transform {
                let r = rotation_of(t, &format!("{path}.transform"))?;
                let pivot = Vec3::from(t.pivot);
                let shift = Vec3::from(t.translation);
                if pivot.iter().chain(shift.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("{path}.transform must be finite")));
                }
                // Forward: x' = R x + (pivot − R pivot + shift); inverse uses Rᵀ.
                let forward = Affine { a: r, b: pivot - r * pivot + shift };
                slot.inverse_motion = Some(Affine {
                    a: r.transpose(),
                    b: -(r.transpose() * forward.b),
                });
            }
        }
        Ok(out)
    }

    /// Applying `self` and then `next`. Removals accumulate, color maps compose (without
    /// the intermediate clamp) and motions compose.
    pub fn then(&self, next: &ResolvedEdit) -> Result<ResolvedEdit> {
        if self.classes.len() != next.classes.len() {
            return Err(Error::invalid("edits were resolved against different class sets"));
        }
        let compose = |first: Option<Affine>, second: Option<Affine>| match (first, second) {
            (None, x) | (x, None) => x,
            (Some(a), Some(b)) => Some(a.then(&b)),
        };
        Ok(ResolvedEdit {
            classes: self
                .classes
                .iter()
                .zip(&next.classes)
                .map(|(a, b)| ResolvedClassEdit {
                    color: compose(a.color, b.color),
                    // Undoing both motions runs the second one's inverse first.
                    inverse_motion: compose(b.inverse_motion, a.inverse_motion),
                    remove: a.remove || b.remove,
                })
                .collect(),
        })
    }
}

/// Renders `camera` through an edited field: color, masks, depth and opacity.
pub fn render_edited(field: &VoxelField, camera: &Camera, edit: &ResolvedEdit, samples_per_ray: usize) -> Result<Frame> {
    let m = field.m();
    if edit.classes.len() != m {
        return Err(Error::invalid("edit was resolved against a different class set"));
    }
    if samples_per_ray == 0 {
        return Err(Error::invalid("samples per ray must be at least 1"));
    }
    let moved: Vec<usize> = (0..m).filter(|&i| edit.classes[i].inverse_motion.is_some()).collect();
    let init = || (RayScratch::default(), vec![0.0; 4 * m], vec![0.0; m], vec![[0.0; 3]; m]);
    render_pixels(camera, m, init, |(s, raw, sig2, col2), ray| {
        sample_distances(ray, samples_per_ray, midpoint(), &mut s.t, &mut s.delta)?;
        field.sample_ray(ray, &s.t, &s.delta, &mut s.samples);
        let samples = &mut s.samples;
        for j in 0..samples.len() {
            let x = ray.at(samples.t[j]);
            for &i in &moved {
                let inv = edit.classes[i].inverse_motion.as_ref().expect("moved class");
                field.query_into(&inv.apply(&x), &ray.direction, raw, sig2, col2);
                samples.sigma[j * m + i] = sig2[i];
                samples.color[j * m + i] = col2[i];
            }
            for (i, e) in edit.classes.iter().enumerate() {
                if e.remove {
                    samples.sigma[j * m + i] = 0.0;
                }
                if let Some(c) = &e.color {
                    let v = c.apply(&Vec3::from(samples.color[j * m + i]));
                    samples.color[j * m + i] = [v.x.clamp(0.0, 1.0), v.y.clamp(0.0, 1.0), v.z.clamp(0.0, 1.0)];
                }
            }
        }
        Ok(composite_full(samples))
    })
}

/// Dolly zoom: the camera travels `travel` along its view axis toward a target plane
/// `target_distance` ahead while the focal length scales with the remaining distance, so
/// the target plane keeps its framing. Frames are evenly spaced and include both ends.
pub fn dolly_zoom_path(start: &Camera, target_distance: f64, travel: f64, frames: usize) -> Result<Vec<Camera>> {
    start.validate()?;
    if frames == 0 {
        return Err(Error::invalid("a camera path needs at least one frame"));
    }
    if !(target_distance > 0.0 && target_distance.is_finite()) {
        return Err(Error::invalid("the target must lie in front of the camera"));
    }
    if !travel.is_finite() || travel >= target_distance {
        return Err(Error::invalid(format!(
            "travelling {travel} reaches or passes the target at distance {target_distance}"
        )));
    }
    let forward = start.forward();
    Ok((0..frames)
        .map(|k| {
            let s = if frames == 1 { 0.0 } else { travel * k as f64 / (frames - 1) as f64 };
            let remaining = target_distance - s;
            let scale = remaining / target_distance;
            let mut cam = start.clone();
            let position = start.position() + forward * s;
            for a in 0..3 {
                cam.cam_to_world[a][3] = position[a];
            }
            cam.fx = start.fx * scale;
            cam.fy = start.fy * scale;
            cam
        })
        .collect())
}
