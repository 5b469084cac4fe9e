//! Dataset directory layout:
//!
//! ```text
//! scene.json              scene spec (classes, primitives, rig)
//! cameras.json            list of cameras, one per view
//! rgb/<view>.png          8-bit RGB
//! mask/<class>/<view>.png 16-bit linear soft mask
//! manifest.json           version, splits and SHA-256 of every other file
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::images::{decode_gray16, decode_rgb8, encode_gray16, encode_rgb8};
use super::{read_file, read_json, sha256_hex, write_file};
use crate::error::{Error, Result};
use crate::field::ClassSet;
use crate::geometry::Camera;
use crate::scenegen::{NoiseStats, Scene, SceneSpec};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub classes: Vec<String>,
    pub background_class: String,
    pub views: Vec<String>,
    pub splits: Splits,
    pub files: Vec<FileEntry>,
    /// Seed of the mask corruption pass.
    pub seed: u64,
    pub noise: NoiseStats,
    pub spec: SceneSpec,
}

/// Rendered images handed to [`write_dataset`], one entry per view.
#[derive(Clone, Debug, Default)]
pub struct DatasetImages {
    pub rgb: Vec<Vec<[f64; 3]>>,
    /// `masks[view][pixel * m + class]`.
    pub masks: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub rgb: Vec<[f64; 3]>,
    /// `masks[pixel * m + class]`, dequantized to [0, 1].
    pub masks: Vec<f64>,
}

impl View {
    pub fn mask_at(&self, pixel: usize, m: usize) -> &[f64] {
        &self.masks[pixel * m..(pixel + 1) * m]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub class_set: ClassSet,
    pub views: Vec<View>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Dataset {
    pub fn m(&self) -> usize {
        self.class_set.m()
    }

    /// Views of a named split ("train", "val" or "all").
    pub fn split(&self, name: &str) -> Result<Vec<usize>> {
        match name {
            "train" => Ok(self.train.clone()),
            "val" => Ok(self.val.clone()),
            "all" => Ok((0..self.views.len()).collect()),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

pub fn view_name(index: usize) -> String {
    format!("{index:03}")
}

fn rel_rgb(view: &str) -> String {
    format!("rgb/{view}.png")
}

fn rel_mask(class: &str, view: &str) -> String {
    format!("mask/{class}/{view}.png")
}

pub(crate) fn write_dataset(
    dir: &Path,
    spec: &SceneSpec,
    scene: &Scene,
    images: &DatasetImages,
    noise: NoiseStats,
) -> Result<Manifest> {
    let m = scene.class_set.m();
    let mut files = Vec::new();
    let mut put = |rel: String, bytes: Vec<u8>| -> Result<()> {
        write_file(&dir.join(&rel), &bytes)?;
        files.push(FileEntry {
            sha256: sha256_hex(&bytes),
            path: rel,
        });
        Ok(())
    };
    put("scene.json".into(), json_bytes(spec))?;
    put("cameras.json".into(), json_bytes(&scene.cameras))?;
    let mut views = Vec::new();
    for (k, camera) in scene.cameras.iter().enumerate() {
        let name = view_name(k);
        put(rel_rgb(&name), encode_rgb8(camera.width, camera.height, &images.rgb[k])?)?;
        for (i, class) in scene.class_set.names().iter().enumerate() {
            let channel: Vec<f64> = images.masks[k].iter().skip(i).step_by(m).copied().collect();
            put(rel_mask(class, &name), encode_gray16(camera.width, camera.height, &channel)?)?;
        }
        views.push(name);
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        classes: scene.class_set.names().to_vec(),
        background_class: spec.background_class.clone(),
        views,
        splits: Splits {
            train: scene.train.clone(),
            val: scene.val.clone(),
        },
        files,
        seed: spec.mask_noise.seed,
        noise,
        spec: spec.clone(),
    };
    super::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s.into_bytes()
}

/// Loads and verifies a dataset directory. Every file listed in the manifest must exist
/// and match its recorded hash.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported dataset format version {}", manifest.format_version),
        ));
    }
    let class_set = manifest.spec.validate()?;
    if class_set.names() != manifest.classes.as_slice() {
        return Err(Error::format(&manifest_path, "class list disagrees with the scene spec"));
    }
    for class in class_set.names() {
        let class_dir = dir.join("mask").join(class);
        if !class_dir.is_dir() {
            return Err(Error::format(
                class_dir,
                format!("mask directory for class {class:?} is missing"),
            ));
        }
    }

    let mut verified = std::collections::HashMap::new();
    for entry in &manifest.files {
        let path = dir.join(&entry.path);
        let bytes = read_file(&path)?;
        let found = sha256_hex(&bytes);
        if found != entry.sha256 {
            return Err(Error::HashMismatch {
                path,
                expected: entry.sha256.clone(),
                found,
            });
        }
        verified.insert(entry.path.clone(), bytes);
    }
    let mut take = |rel: &str| -> Result<(PathBuf, Vec<u8>)> {
        let path = dir.join(rel);
        match verified.remove(rel) {
            Some(bytes) => Ok((path, bytes)),
            None => Err(Error::format(path, "file is not listed in the manifest")),
        }
    };

    let (cam_path, cam_bytes) = take("cameras.json")?;
    let cameras: Vec<Camera> = serde_json::from_slice(&cam_bytes).map_err(|e| Error::format(&cam_path, e.to_string()))?;
    if cameras.len() != manifest.views.len() {
        return Err(Error::format(cam_path, "camera count differs from the view count"));
    }
    for c in &cameras {
        c.validate()?;
    }

    let m = class_set.m();
    let mut views = Vec::with_capacity(cameras.len());
    for (name, camera) in manifest.views.iter().zip(cameras) {
        let (path, bytes) = take(&rel_rgb(name))?;
        let (w, h, rgb) = decode_rgb8(&bytes, &path)?;
        if (w, h) != (camera.width, camera.height) {
            return Err(Error::format(path, "image size differs from its camera"));
        }
        let mut masks = vec![0.0; rgb.len() * m];
        for (i, class) in class_set.names().iter().enumerate() {
            let (path, bytes) = take(&rel_mask(class, name))?;
            let (mw, mh, values) = decode_gray16(&bytes, &path)?;
            if (mw, mh) != (w, h) {
                return Err(Error::format(path, "mask size differs from its image"));
            }
            for (p, v) in values.into_iter().enumerate() {
                masks[p * m + i] = v;
            }
        }
        views.push(View {
            name: name.clone(),
            camera,
            rgb,
            masks,
        });
    }
    for &k in manifest.splits.train.iter().chain(&manifest.splits.val) {
        if k >= views.len() {
            return Err(Error::format(&manifest_path, format!("split references missing view {k}")));
        }
    }
    Ok(Dataset {
        spec: manifest.spec,
        class_set,
        views,
        train: manifest.splits.train,
        val: manifest.splits.val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{build_scene, emit_dataset, render_reference, MaskNoise, Primitive, Shape};

    fn tiny_spec() -> SceneSpec {
        let text = r#"{
            "name": "tiny",
            "classes": ["bg", "blob"],
            "background_class": "bg",
            "primitives": [
                {"shape": {"kind": "shell", "center": [0, 0, 0], "inner_radius": 2.5, "outer_radius": 2.8},
                 "density": 20, "color": [0.2, 0.3, 0.4], "class": "bg"},
                {"shape": {"kind": "soft_blob", "center": [0, 0, 0], "scale": 0.4},
                 "density": 15, "color": [0.9, 0.3, 0.1], "class": "blob"}
            ],
            "rig": {"radius": 1.8, "elevation_deg": 10, "count": 3, "focal": 8, "val_every": 3},
            "image": {"width": 8, "height": 6},
            "t_near": 0.05,
            "t_far": 5.0,
            "bounds": {"min": [-3, -3, -3], "max": [3, 3, 3]},
            "render_steps": 300
        }"#;
        SceneSpec::from_json(text).unwrap()
    }

    #[test]
    fn emitted_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let scene = build_scene(&tiny_spec()).unwrap();
        emit_dataset(&scene, dir.path(), &MaskNoise::default()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.views.len(), 3);
        assert_eq!(ds.train, vec![0, 1]);
        assert_eq!(ds.val, vec![2]);
        assert_eq!(ds.views[1].camera, scene.cameras[1]);

        // Masks equal the reference masks up to 16-bit quantization.
        let reference = render_reference(&scene.field, &scene.cameras[0], 300).unwrap();
        for (p, out) in reference.iter().enumerate() {
            for i in 0..2 {
                let q = (out.mask[i].clamp(0.0, 1.0) * 65535.0).round() / 65535.0;
                assert_eq!(ds.views[0].mask_at(p, 2)[i], q);
            }
        }

        // Re-emitting the loaded data produces the same bytes.
        let again = tempfile::tempdir().unwrap();
        emit_dataset(&scene, again.path(), &MaskNoise::default()).unwrap();
        let a = std::fs::read(dir.path().join("manifest.json")).unwrap();
        let b = std::fs::read(again.path().join("manifest.json")).unwrap();
        assert_eq!(a, b);
        assert_eq!(load_dataset(again.path()).unwrap(), ds);
    }

    #[test]
    fn corrupted_file_is_refused_with_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let scene = build_scene(&tiny_spec()).unwrap();
        emit_dataset(&scene, dir.path(), &MaskNoise::default()).unwrap();
        let victim = dir.path().join("rgb/001.png");
        let mut bytes = std::fs::read(&victim).unwrap();
        let last = bytes.len() - 20;
        bytes[last] ^= 0xff;
        std::fs::write(&victim, bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::HashMismatch { .. }));
        assert!(err.to_string().contains("rgb/001.png"), "{err}");
    }

    #[test]
    fn missing_class_directory_names_the_class() {
        let dir = tempfile::tempdir().unwrap();
        let scene = build_scene(&tiny_spec()).unwrap();
        emit_dataset(&scene, dir.path(), &MaskNoise::default()).unwrap();
        std::fs::remove_dir_all(dir.path().join("mask/blob")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("\"blob\""), "{err}");
    }

    #[test]
    fn unknown_version_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let scene = build_scene(&tiny_spec()).unwrap();
        emit_dataset(&scene, dir.path(), &MaskNoise::default()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&path, text).unwrap();
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn noise_only_touches_training_views() {
        let mut spec = tiny_spec();
        spec.image = crate::scenegen::ImageSize { width: 32, height: 32 };
        spec.rig.focal = 30.0;
        spec.primitives.push(Primitive {
            shape: Shape::SoftBlob { center: [0.3, 0.3, 0.0], scale: 0.2 },
            density: 15.0,
            color: [0.1, 0.9, 0.1],
            class: "bg".into(),
        });
        let scene = build_scene(&spec).unwrap();
        let clean = tempfile::tempdir().unwrap();
        let noisy = tempfile::tempdir().unwrap();
        emit_dataset(&scene, clean.path(), &MaskNoise::default()).unwrap();
        let report = emit_dataset(&scene, noisy.path(), &MaskNoise { outlier_rate: 1.0, ..MaskNoise::default() }).unwrap();
        assert!(report.noise.flipped_tiles > 0);
        let a = load_dataset(clean.path()).unwrap();
        let b = load_dataset(noisy.path()).unwrap();
        assert_eq!(a.views[2].masks, b.views[2].masks);
        assert_ne!(a.views[0].masks, b.views[0].masks);
        assert_eq!(a.views[0].rgb, b.views[0].rgb);
    }
}
