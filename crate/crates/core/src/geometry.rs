//! Pinhole cameras, rays and sample stations along rays.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Pinhole camera. Looks down its local −z axis with +y up; image rows grow downwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major rigid transform from camera to world coordinates.
    pub cam_to_world: [[f64; 4]; 4],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with the principal point at the image center.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        width: u32,
        height: u32,
        focal: f64,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::invalid("look_at: eye coincides with target"));
        }
        let back = -forward.normalize();
        let right = up.cross(&back);
        if right.norm() < 1e-12 {
            return Err(Error::invalid("look_at: up vector parallel to view direction"));
        }
        let right = right.normalize();
        let true_up = back.cross(&right);
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r][0] = right[r];
            m[r][1] = true_up[r];
            m[r][2] = back[r];
            m[r][3] = eye[r];
        }
        m[3][3] = 1.0;
        let camera = Camera {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            cam_to_world: m,
            near,
            far,
        };
        camera.validate()?;
        Ok(camera)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let m = &self.cam_to_world;
        Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        )
    }

    pub fn position(&self) -> Vec3 {
        let m = &self.cam_to_world;
        Vec3::new(m[0][3], m[1][3], m[2][3])
    }

    /// World-space viewing direction (camera −z).
    pub fn forward(&self) -> Vec3 {
        -self.rotation().column(2).into_owned()
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let m = &self.cam_to_world;
        Matrix4::from_fn(|r, c| m[r][c])
    }

    pub fn set_matrix(&mut self, matrix: &Matrix4<f64>) {
        for r in 0..4 {
            for c in 0..4 {
                self.cam_to_world[r][c] = matrix[(r, c)];
            }
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera: zero image size"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("camera: focal lengths must be positive"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::invalid("camera: principal point outside the image"));
        }
        if !(0.0 <= self.near && self.near < self.far) || !self.far.is_finite() {
            return Err(Error::invalid(format!(
                "camera: need 0 <= near < far, got [{}, {}]",
                self.near, self.far
            )));
        }
        if self.cam_to_world.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("camera: non-finite pose"));
        }
        let r = self.rotation();
        let gram = r.transpose() * r - Matrix3::identity();
        if gram.abs().max() > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("camera: rotation block is not orthonormal"));
        }
        let m = &self.cam_to_world;
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid("camera: last row of cam_to_world must be (0, 0, 0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        let norm = direction.norm();
        if !(norm > 0.0) || !norm.is_finite() || origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("ray: non-finite origin or degenerate direction"));
        }
        if !(0.0 <= t_near && t_near < t_far) {
            return Err(Error::invalid("ray: need 0 <= t_near < t_far"));
        }
        Ok(Ray {
            origin,
            direction: direction / norm,
            t_near,
            t_far,
        })
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub t: f64,
    pub x: Vec3,
    pub delta: f64,
}

/// Ray through continuous pixel coordinates `px` (pixel centers sit at half-integers),
/// optionally displaced by a sub-pixel `jitter`.
pub fn generate_ray(camera: &Camera, px: [f64; 2], jitter: Option<[f64; 2]>) -> Result<Ray> {
    let [mut u, mut v] = px;
    if !(u.is_finite() && v.is_finite())
        || u < 0.0
        || v < 0.0
        || u > camera.width as f64
        || v > camera.height as f64
    {
        return Err(Error::invalid(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            camera.width, camera.height
        )));
    }
    if let Some([ju, jv]) = jitter {
        u += ju;
        v += jv;
    }
    let local = Vec3::new((u - camera.cx) / camera.fx, -(v - camera.cy) / camera.fy, -1.0);
    let m = &camera.cam_to_world;
    let world = Vec3::new(
        m[0][0] * local.x + m[0][1] * local.y + m[0][2] * local.z,
        m[1][0] * local.x + m[1][1] * local.y + m[1][2] * local.z,
        m[2][0] * local.x + m[2][1] * local.y + m[2][2] * local.z,
    );
    Ray::new(camera.position(), world, camera.near, camera.far)
}

/// Ray through the center of integer pixel (`col`, `row`).
pub fn pixel_ray(camera: &Camera, col: u32, row: u32) -> Result<Ray> {
    generate_ray(camera, [col as f64 + 0.5, row as f64 + 0.5], None)
}

/// How sample stations are placed inside each equal-width bin of `[t_near, t_far]`.
pub enum Sampling<'a, R: Rng + ?Sized> {
    /// Bin midpoints. Deterministic, used for evaluation renders and tests.
    Midpoint,
    /// One uniform draw per bin.
    Stratified(&'a mut R),
}

/// Midpoint sampling without naming an rng type.
pub fn midpoint() -> Sampling<'static, rand_chacha::ChaCha8Rng> {
    Sampling::Midpoint
}

/// Writes `n` sample distances into `t` and their segment lengths into `delta`.
pub fn sample_distances<R: Rng + ?Sized>(
    ray: &Ray,
    n: usize,
    sampling: Sampling<'_, R>,
    t: &mut Vec<f64>,
    delta: &mut Vec<f64>,
) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    t.clear();
    delta.clear();
    let width = (ray.t_far - ray.t_near) / n as f64;
    match sampling {
        Sampling::Midpoint => {
            t.extend((0..n).map(|j| ray.t_near + (j as f64 + 0.5) * width));
        }
        Sampling::Stratified(rng) => {
            t.extend((0..n).map(|j| ray.t_near + (j as f64 + rng.gen::<f64>()) * width));
        }
    }
    delta.extend(t.windows(2).map(|w| w[1] - w[0]));
    delta.push(ray.t_far - t[n - 1]);
    Ok(())
}

pub fn stratified_samples<R: Rng + ?Sized>(
    ray: &Ray,
    n: usize,
    sampling: Sampling<'_, R>,
) -> Result<Vec<SamplePoint>> {
    let mut t = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    sample_distances(ray, n, sampling, &mut t, &mut delta)?;
    Ok(t
        .into_iter()
        .zip(delta)
        .map(|(t, delta)| SamplePoint {
            t,
            x: ray.at(t),
            delta,
        })
        .collect())
}
