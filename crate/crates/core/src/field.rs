//! Trainable scene representation: a dense vertex grid of raw per-class parameters,
//! read back through trilinear interpolation followed by activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Ray, Vec3};

/// Density activation. Smooth and strictly increasing, so no voxel stops receiving gradient.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    if y > 35.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// softplus'(raw) written in terms of the activated value `softplus(raw)`.
#[inline]
fn softplus_slope_from_output(sigma: f64) -> f64 {
    -(-sigma).exp_m1()
}

/// Raw density every voxel starts from: a faint fog of 0.1 per unit length.
pub fn initial_raw_density() -> f64 {
    softplus_inverse(0.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSet {
    names: Vec<String>,
    background_index: usize,
}

impl ClassSet {
    pub fn new(names: Vec<String>, background_index: usize) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("class set needs at least one class"));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() || names[..i].contains(name) {
                return Err(Error::invalid(format!("class name {name:?} is empty or repeated")));
            }
        }
        if background_index >= names.len() {
            return Err(Error::invalid(format!(
                "background index {background_index} out of range for {} classes",
                names.len()
            )));
        }
        Ok(ClassSet {
            names,
            background_index,
        })
    }

    pub fn m(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn background_index(&self) -> usize {
        self.background_index
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn cube(half_extent: f64) -> Self {
        Aabb {
            min: [-half_extent; 3],
            max: [half_extent; 3],
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|a| x[a] >= self.min[a] && x[a] <= self.max[a])
    }

    fn validate(&self) -> Result<()> {
        if (0..3).all(|a| self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] < self.max[a]) {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate bounds {self:?}")))
        }
    }
}

/// The ≤8 grid vertices surrounding a point and their trilinear weights.
#[derive(Clone, Copy, Debug)]
pub struct Corners {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

/// Dense grid of `channels` raw values stored at every vertex. Vertex `(i, j, k)` sits at
/// `min + (i, j, k) * cell` so the outermost vertices lie on the bounds. Vertices are
/// numbered x-fastest; channels of one vertex are contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    resolution: [usize; 3],
    bounds: Aabb,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(resolution: [usize; 3], bounds: Aabb, channels: usize, fill: &[f64]) -> Result<Self> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(Error::invalid(format!("grid resolution {resolution:?}: every axis needs >= 2 vertices")));
        }
        bounds.validate()?;
        if fill.len() != channels || channels == 0 {
            return Err(Error::invalid("grid fill must provide one value per channel"));
        }
        let vertices = resolution.iter().product::<usize>();
        let mut data = Vec::with_capacity(vertices * channels);
        for _ in 0..vertices {
            data.extend_from_slice(fill);
        }
        Ok(Grid {
            resolution,
            bounds,
            channels,
            data,
        })
    }

    pub fn from_data(resolution: [usize; 3], bounds: Aabb, channels: usize, data: Vec<f64>) -> Result<Self> {
        let mut grid = Grid::new(resolution, bounds, channels, &vec![0.0; channels])?;
        if data.len() != grid.data.len() {
            return Err(Error::invalid(format!(
                "grid data has {} values, expected {}",
                data.len(),
                grid.data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid parameters".into()));
        }
        grid.data = data;
        Ok(grid)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn vertex_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn vertex_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    pub fn vertex_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let ijk = [i, j, k];
        Vec3::from_fn(|a, _| {
            let span = self.bounds.max[a] - self.bounds.min[a];
            self.bounds.min[a] + span * ijk[a] as f64 / (self.resolution[a] - 1) as f64
        })
    }

    /// Corners around `x`, or `None` outside the bounds.
    #[inline]
    pub fn locate(&self, x: &Vec3) -> Option<Corners> {
        let mut cell = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let lo = self.bounds.min[a];
            let hi = self.bounds.max[a];
            if !(x[a] >= lo && x[a] <= hi) {
                return None;
            }
            let cells = self.resolution[a] - 1;
            let u = (x[a] - lo) / (hi - lo) * cells as f64;
            let i = (u.floor() as usize).min(cells - 1);
            cell[a] = i;
            frac[a] = u - i as f64;
        }
        let base = self.vertex_index(cell[0], cell[1], cell[2]);
        let sx = 1;
        let sy = self.resolution[0];
        let sz = self.resolution[0] * self.resolution[1];
        let [fx, fy, fz] = frac;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        Some(Corners {
            index: [
                base,
                base + sx,
                base + sy,
                base + sx + sy,
                base + sz,
                base + sx + sz,
                base + sy + sz,
                base + sx + sy + sz,
            ],
            weight: [
                gx * gy * gz,
                fx * gy * gz,
                gx * fy * gz,
                fx * fy * gz,
                gx * gy * fz,
                fx * gy * fz,
                gx * fy * fz,
                fx * fy * fz,
            ],
        })
    }

    #[inline]
    pub fn interpolate(&self, corners: &Corners, out: &mut [f64]) {
        let c = self.channels;
        out[..c].fill(0.0);
        for (&v, &w) in corners.index.iter().zip(&corners.weight) {
            let src = &self.data[v * c..(v + 1) * c];
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }

    /// Adjoint of [`Grid::interpolate`]: adds `weight * upstream` into `grads` at each corner.
    #[inline]
    pub fn scatter(&self, corners: &Corners, upstream: &[f64], grads: &mut [f64]) {
        let c = self.channels;
        for (&v, &w) in corners.index.iter().zip(&corners.weight) {
            let dst = &mut grads[v * c..(v + 1) * c];
            for (g, u) in dst.iter_mut().zip(upstream) {
                *g += w * u;
            }
        }
    }
}

/// Per-sample bundle of the M class densities and colors.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRadianceSample {
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub delta: f64,
}

/// All samples of one ray in class-contiguous layout: entry `j * m + i` is class `i` at
/// sample `j`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamples {
    pub m: usize,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl RaySamples {
    pub fn with_classes(m: usize) -> Self {
        RaySamples {
            m,
            ..Default::default()
        }
    }

    /// Packs explicit samples. Distances `t` start at `t0` and advance by each `delta`.
    pub fn from_samples(samples: &[ClassRadianceSample], t0: f64) -> Result<Self> {
        let m = samples.first().map_or(1, |s| s.sigma.len());
        let mut out = RaySamples::with_classes(m);
        let mut t = t0;
        for s in samples {
            if s.sigma.len() != m || s.color.len() != m {
                return Err(Error::invalid("samples disagree on the class count"));
            }
            out.push(t, s.delta, &s.sigma, &s.color)?;
            t += s.delta;
        }
        Ok(out)
    }

    pub fn push(&mut self, t: f64, delta: f64, sigma: &[f64], color: &[[f64; 3]]) -> Result<()> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::invalid(format!("segment length {delta} must be positive")));
        }
        if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("densities must be finite and non-negative"));
        }
        self.t.push(t);
        self.delta.push(delta);
        self.sigma.extend_from_slice(sigma);
        self.color.extend_from_slice(color);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn clear(&mut self) {
        self.t.clear();
        self.delta.clear();
        self.sigma.clear();
        self.color.clear();
    }

    pub fn sample(&self, j: usize) -> ClassRadianceSample {
        let r = j * self.m..(j + 1) * self.m;
        ClassRadianceSample {
            sigma: self.sigma[r.clone()].to_vec(),
            color: self.color[r].to_vec(),
            delta: self.delta[j],
        }
    }

    pub fn sigma_at(&self, j: usize) -> &[f64] {
        &self.sigma[j * self.m..(j + 1) * self.m]
    }

    pub fn color_at(&self, j: usize) -> &[[f64; 3]] {
        &self.color[j * self.m..(j + 1) * self.m]
    }

    /// Keeps only class `i`, as a one-class sample list.
    pub fn class_view(&self, i: usize) -> Result<RaySamples> {
        if i >= self.m {
            return Err(Error::invalid(format!("class {i} out of range for {} classes", self.m)));
        }
        Ok(RaySamples {
            m: 1,
            t: self.t.clone(),
            delta: self.delta.clone(),
            sigma: (0..self.len()).map(|j| self.sigma[j * self.m + i]).collect(),
            color: (0..self.len()).map(|j| self.color[j * self.m + i]).collect(),
        })
    }
}

/// Voxel field with M independent (density, RGB) layers. Channel layout per vertex:
/// `[raw density of class 0..M, raw RGB of class 0, raw RGB of class 1, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField {
    grid: Grid,
    class_set: ClassSet,
}

impl VoxelField {
    /// Fresh field: faint fog in every class and mid-gray colors.
    pub fn new(resolution: [usize; 3], bounds: Aabb, class_set: ClassSet) -> Result<Self> {
        let m = class_set.m();
        let mut fill = vec![initial_raw_density(); m];
        fill.extend(std::iter::repeat_n(0.0, 3 * m));
        Ok(VoxelField {
            grid: Grid::new(resolution, bounds, 4 * m, &fill)?,
            class_set,
        })
    }

    pub fn from_grid(grid: Grid, class_set: ClassSet) -> Result<Self> {
        if grid.channels() != 4 * class_set.m() {
            return Err(Error::invalid(format!(
                "grid has {} channels, {} classes need {}",
                grid.channels(),
                class_set.m(),
                4 * class_set.m()
            )));
        }
        Ok(VoxelField { grid, class_set })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut Grid {
        &mut self.grid
    }

    pub fn class_set(&self) -> &ClassSet {
        &self.class_set
    }

    pub fn m(&self) -> usize {
        self.class_set.m()
    }

    pub fn params(&self) -> &[f64] {
        self.grid.data()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.grid.data_mut()
    }

    pub fn raw_density_channel(&self, class: usize) -> usize {
        class
    }

    pub fn raw_color_channel(&self, class: usize, rgb: usize) -> usize {
        self.m() + 3 * class + rgb
    }

    /// Activated densities and colors at `x`, written into the output slices. Returns
    /// `false` (and writes vacuum) outside the grid. The view direction is accepted for
    /// interface parity but colors are diffuse.
    #[inline]
    pub fn query_into(&self, x: &Vec3, _d: &Vec3, raw: &mut [f64], sigma: &mut [f64], color: &mut [[f64; 3]]) -> bool {
        let m = self.m();
        match self.grid.locate(x) {
            None => {
                sigma[..m].fill(0.0);
                color[..m].fill([0.0; 3]);
                false
            }
            Some(corners) => {
                self.grid.interpolate(&corners, raw);
                for i in 0..m {
                    sigma[i] = softplus(raw[i]);
                    let c = &raw[m + 3 * i..m + 3 * i + 3];
                    color[i] = [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])];
                }
                true
            }
        }
    }

    /// Activated `(densities, colors)` at `x`; vacuum outside the grid.
    pub fn query(&self, x: &Vec3, d: &Vec3) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
        check_point(x)?;
        let m = self.m();
        let mut raw = vec![0.0; 4 * m];
        let mut sigma = vec![0.0; m];
        let mut color = vec![[0.0; 3]; m];
        self.query_into(x, d, &mut raw, &mut sigma, &mut color);
        Ok((sigma, color))
    }

    /// Accumulates into `grads` (same layout as [`VoxelField::params`]) the gradient of
    /// `<d_sigma, sigma(x)> + <d_color, color(x)>` with respect to the raw parameters.
    pub fn query_grad(
        &self,
        x: &Vec3,
        d: &Vec3,
        d_sigma: &[f64],
        d_color: &[[f64; 3]],
        grads: &mut [f64],
    ) -> Result<()> {
        check_point(x)?;
        let m = self.m();
        if d_sigma.len() != m || d_color.len() != m || grads.len() != self.params().len() {
            return Err(Error::invalid("query_grad: upstream or gradient buffer has the wrong shape"));
        }
        let (sigma, color) = self.query(x, d)?;
        let mut scratch = vec![0.0; 4 * m];
        self.backprop_activated(x, &sigma, &color, d_sigma, d_color, &mut scratch, grads);
        Ok(())
    }

    /// Backward pass given the activated values already computed at `x`.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    pub fn backprop_activated(
        &self,
        x: &Vec3,
        sigma: &[f64],
        color: &[[f64; 3]],
        d_sigma: &[f64],
        d_color: &[[f64; 3]],
        scratch: &mut [f64],
        grads: &mut [f64],
    ) {
        let Some(corners) = self.grid.locate(x) else {
            return;
        };
        let m = self.m();
        for i in 0..m {
            scratch[i] = d_sigma[i] * softplus_slope_from_output(sigma[i]);
            for k in 0..3 {
                let c = color[i][k];
                scratch[m + 3 * i + k] = d_color[i][k] * c * (1.0 - c);
            }
        }
        self.grid.scatter(&corners, &scratch[..4 * m], grads);
    }

    /// Evaluates the field at the stations `t` along `ray`, appending to `out`.
    pub fn sample_ray(&self, ray: &Ray, t: &[f64], delta: &[f64], out: &mut RaySamples) {
        let m = self.m();
        out.clear();
        out.m = m;
        let mut raw = vec![0.0; 4 * m];
        let mut sigma = vec![0.0; m];
        let mut color = vec![[0.0; 3]; m];
        for (&tj, &dj) in t.iter().zip(delta) {
            let x = ray.at(tj);
            self.query_into(&x, &ray.direction, &mut raw, &mut sigma, &mut color);
            out.t.push(tj);
            out.delta.push(dj);
            out.sigma.extend_from_slice(&sigma);
            out.color.extend_from_slice(&color);
        }
    }
}

/// Single-density field with RGB and M class logits per vertex, the layout of the
/// semantic-logit baseline. Channels: `[raw density, raw RGB, logit 0..M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SnerfField {
    grid: Grid,
    class_set: ClassSet,
}

impl SnerfField {
    pub fn new(resolution: [usize; 3], bounds: Aabb, class_set: ClassSet) -> Result<Self> {
        let mut fill = vec![initial_raw_density(), 0.0, 0.0, 0.0];
        fill.extend(std::iter::repeat(0.0).take(class_set.m()));
        Ok(SnerfField {
            grid: Grid::new(resolution, bounds, 4 + class_set.m(), &fill)?,
            class_set,
        })
    }

    pub fn from_grid(grid: Grid, class_set: ClassSet) -> Result<Self> {
        if grid.channels() != 4 + class_set.m() {
            return Err(Error::invalid("grid channel count does not match a logit field"));
        }
        Ok(SnerfField { grid, class_set })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn class_set(&self) -> &ClassSet {
        &self.class_set
    }

    pub fn m(&self) -> usize {
        self.class_set.m()
    }

    pub fn params(&self) -> &[f64] {
        self.grid.data()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.grid.data_mut()
    }

    /// `(density, color, logits)` at `x`; zero everywhere outside the grid.
    #[inline]
    pub fn query_into(&self, x: &Vec3, raw: &mut [f64], logits: &mut [f64]) -> (f64, [f64; 3]) {
        let m = self.m();
        match self.grid.locate(x) {
            None => {
                logits[..m].fill(0.0);
                (0.0, [0.0; 3])
            }
            Some(corners) => {
                self.grid.interpolate(&corners, raw);
                logits[..m].copy_from_slice(&raw[4..4 + m]);
                (softplus(raw[0]), [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])])
            }
        }
    }

    #[inline]
    #[allow(clippy::too_many_arguments)]
    pub fn backprop_activated(
        &self,
        x: &Vec3,
        sigma: f64,
        color: [f64; 3],
        d_sigma: f64,
        d_color: [f64; 3],
        d_logits: &[f64],
        scratch: &mut [f64],
        grads: &mut [f64],
    ) {
        let Some(corners) = self.grid.locate(x) else {
            return;
        };
        let m = self.m();
        scratch[0] = d_sigma * softplus_slope_from_output(sigma);
        for k in 0..3 {
            scratch[1 + k] = d_color[k] * color[k] * (1.0 - color[k]);
        }
        scratch[4..4 + m].copy_from_slice(&d_logits[..m]);
        self.grid.scatter(&corners, &scratch[..4 + m], grads);
    }
}

fn check_point(x: &Vec3) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("non-finite query point {x:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn classes(m: usize) -> ClassSet {
        ClassSet::new((0..m).map(|i| format!("c{i}")).collect(), 0).unwrap()
    }

    fn random_field(m: usize, seed: u64) -> VoxelField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = VoxelField::new([4, 5, 3], Aabb { min: [-1.0, -0.5, 0.0], max: [1.0, 1.5, 0.7] }, classes(m)).unwrap();
        for p in f.params_mut() {
            *p = rng.gen_range(-2.0..2.0);
        }
        f
    }

    fn random_interior(rng: &mut ChaCha8Rng, b: &Aabb) -> Vec3 {
        Vec3::from_fn(|a, _| rng.gen_range(b.min[a]..b.max[a]))
    }

    #[test]
    fn class_set_validation() {
        assert!(ClassSet::new(vec![], 0).is_err());
        assert!(ClassSet::new(vec!["a".into(), "a".into()], 0).is_err());
        assert!(ClassSet::new(vec!["a".into(), "b".into()], 2).is_err());
        let c = ClassSet::new(vec!["bg".into(), "fg".into()], 0).unwrap();
        assert_eq!(c.index_of("fg"), Some(1));
    }

    #[test]
    fn outside_bounds_is_vacuum() {
        let f = random_field(2, 1);
        let (s, c) = f.query(&Vec3::new(5.0, 0.0, 0.0), &Vec3::z()).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
        assert_eq!(c, vec![[0.0; 3]; 2]);
    }

    #[test]
    fn saturated_softplus_gives_zero_density() {
        let mut f = VoxelField::new([3, 3, 3], Aabb::cube(1.0), classes(2)).unwrap();
        let m = f.m();
        let ch = f.grid().channels();
        for v in 0..f.grid().vertex_count() {
            for i in 0..m {
                f.params_mut()[v * ch + i] = -1e6;
            }
        }
        let (s, _) = f.query(&Vec3::new(0.3, -0.2, 0.1), &Vec3::z()).unwrap();
        assert!(s.iter().all(|&v| (0.0..=1e-6).contains(&v)));
    }

    #[test]
    fn constant_field_interpolates_to_itself() {
        let f = VoxelField::new([5, 4, 3], Aabb::cube(2.0), classes(3)).unwrap();
        let (s, c) = f.query(&Vec3::new(0.37, -1.21, 1.9), &Vec3::z()).unwrap();
        for i in 0..3 {
            assert!((s[i] - 0.1).abs() < 1e-12);
            assert_eq!(c[i], [0.5; 3]);
        }
    }

    #[test]
    fn non_finite_point_is_rejected() {
        let f = random_field(1, 2);
        assert!(f.query(&Vec3::new(f64::NAN, 0.0, 0.0), &Vec3::z()).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let f = random_field(2, 3);
        let mut g = vec![0.0; f.params().len()];
        f.query_grad(&Vec3::new(0.1, 0.2, 0.3), &Vec3::z(), &[0.0; 2], &[[0.0; 3]; 2], &mut g).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertex_aligned_gradient_lands_on_one_vertex() {
        let f = random_field(2, 4);
        let x = f.grid().vertex_position(2, 1, 1);
        let v = f.grid().vertex_index(2, 1, 1);
        let mut g = vec![0.0; f.params().len()];
        f.query_grad(&x, &Vec3::z(), &[1.0, 0.0], &[[0.0; 3], [0.0, 1.0, 0.0]], &mut g).unwrap();
        let ch = f.grid().channels();
        let raw = &f.params()[v * ch..(v + 1) * ch];
        let expect_density = sigmoid(raw[0]);
        let c = sigmoid(raw[f.raw_color_channel(1, 1)]);
        for (idx, &val) in g.iter().enumerate() {
            if idx == v * ch {
                assert!((val - expect_density).abs() < 1e-12);
            } else if idx == v * ch + f.raw_color_channel(1, 1) {
                assert!((val - c * (1.0 - c)).abs() < 1e-12);
            } else {
                assert!(val.abs() < 1e-12, "stray gradient at {idx}: {val}");
            }
        }
    }

    /// Central differences on raw parameters, independent of the adjoint path.
    fn fd_gradient(f: &VoxelField, x: &Vec3, ds: &[f64], dc: &[[f64; 3]], h: f64) -> Vec<f64> {
        let objective = |f: &VoxelField| {
            let (s, c) = f.query(x, &Vec3::z()).unwrap();
            let mut acc = 0.0;
            for i in 0..s.len() {
                acc += ds[i] * s[i];
                for k in 0..3 {
                    acc += dc[i][k] * c[i][k];
                }
            }
            acc
        };
        let mut probe = f.clone();
        (0..f.params().len())
            .map(|p| {
                let orig = probe.params()[p];
                probe.params_mut()[p] = orig + h;
                let up = objective(&probe);
                probe.params_mut()[p] = orig - h;
                let down = objective(&probe);
                probe.params_mut()[p] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn query_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let f = random_field(2, 100 + trial);
            let x = random_interior(&mut rng, &f.grid().bounds());
            let ds: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dc: Vec<[f64; 3]> = (0..2).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            let mut g = vec![0.0; f.params().len()];
            f.query_grad(&x, &Vec3::z(), &ds, &dc, &mut g).unwrap();
            let fd = fd_gradient(&f, &x, &ds, &dc, 1e-3);
            for (a, n) in g.iter().zip(&fd) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                assert!(rel < 1e-4 || (a - n).abs() < 1e-10, "analytic {a} vs fd {n}");
            }
        }
    }

    #[test]
    fn query_grad_is_the_adjoint_of_the_linearized_query() {
        // <u, J v> via a directional derivative of the forward map vs <J^T u, v> via query_grad.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_field(3, 9);
        for _ in 0..10 {
            let x = random_interior(&mut rng, &f.grid().bounds());
            let u_s: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let u_c: Vec<[f64; 3]> = (0..3).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            let v: Vec<f64> = (0..f.params().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut jt_u = vec![0.0; v.len()];
            f.query_grad(&x, &Vec3::z(), &u_s, &u_c, &mut jt_u).unwrap();
            let rhs: f64 = jt_u.iter().zip(&v).map(|(a, b)| a * b).sum();

            let eval = |eps: f64| {
                let mut g = f.clone();
                for (p, dv) in g.params_mut().iter_mut().zip(&v) {
                    *p += eps * dv;
                }
                let (s, c) = g.query(&x, &Vec3::z()).unwrap();
                (0..3).map(|i| u_s[i] * s[i] + (0..3).map(|k| u_c[i][k] * c[i][k]).sum::<f64>()).sum::<f64>()
            };
            let h = 1e-5;
            let lhs = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((lhs - rhs).abs() <= 1e-6 * rhs.abs().max(1e-3), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn class_view_extracts_one_class() {
        let s = RaySamples::from_samples(
            &[
                ClassRadianceSample { sigma: vec![1.0, 2.0], color: vec![[0.1; 3], [0.2; 3]], delta: 0.5 },
                ClassRadianceSample { sigma: vec![3.0, 4.0], color: vec![[0.3; 3], [0.4; 3]], delta: 0.25 },
            ],
            1.0,
        )
        .unwrap();
        assert_eq!(s.t, vec![1.0, 1.5]);
        let v = s.class_view(1).unwrap();
        assert_eq!(v.sigma, vec![2.0, 4.0]);
        assert_eq!(v.color, vec![[0.2; 3], [0.4; 3]]);
        assert!(s.class_view(2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        #[allow(unused_imports)]
        use rand::Rng;

        proptest! {
            #[test]
            fn activated_density_is_non_negative(raw in -1e3f64..1e3) {
                prop_assert!(softplus(raw) >= 0.0);
                let c = sigmoid(raw);
                prop_assert!((0.0..=1.0).contains(&c));
            }

            #[test]
            fn query_is_lipschitz_in_position(seed in 0u64..1000, dx in -1e-4f64..1e-4, dy in -1e-4f64..1e-4) {
                // Raw values lie in [-2, 2], so each channel's trilinear slope is at most
                // 4 / cell per axis; softplus and sigmoid have slope <= 1.
                let f = random_field(2, seed);
                let b = f.grid().bounds();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
                let x = Vec3::from_fn(|a, _| rng.gen_range(b.min[a] + 1e-3..b.max[a] - 1e-3));
                let y = x + Vec3::new(dx, dy, 0.0);
                let (s0, c0) = f.query(&x, &Vec3::z()).unwrap();
                let (s1, c1) = f.query(&y, &Vec3::z()).unwrap();
                let res = f.grid().resolution();
                let min_cell = (0..3).map(|a| (b.max[a] - b.min[a]) / (res[a] - 1) as f64).fold(f64::INFINITY, f64::min);
                let lipschitz = 3.0 * 4.0 / min_cell;
                let dist = (y - x).norm();
                for i in 0..2 {
                    prop_assert!((s1[i] - s0[i]).abs() <= lipschitz * dist + 1e-12);
                    for k in 0..3 {
                        prop_assert!((c1[i][k] - c0[i][k]).abs() <= lipschitz * dist + 1e-12);
                    }
                }
            }
        }
    }
}
