//! Point-based radiance evaluation and volume rendering.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};
use crate::nn::{posenc, posenc_dim, posenc_values, Mlp, MlpVars};
use crate::scalar::Scalar;

/// Distance guard added before inverting neighbor distances.
pub const IDW_EPS: f64 = 1e-8;

/// Pinhole camera. The camera looks down its local −z axis with +y up;
/// pixel rows grow downward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// camera-to-world, 4×4 row-major
    pub c2w: [f64; 16],
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(format!(
                "camera {} needs positive focal lengths and size",
                self.id
            )));
        }
        let r = self.rotation();
        let rtr = geometry::mat_mul(&geometry::transpose(&r), &r);
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let e = if i == j { 1.0 } else { 0.0 };
                if (v - e).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!(
                        "camera {} rotation block is not orthonormal",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn rotation(&self) -> Mat3<f64> {
        let m = &self.c2w;
        [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]
    }

    pub fn position(&self) -> Vec3<f64> {
        [self.c2w[3], self.c2w[7], self.c2w[11]]
    }

    /// Camera at `eye` looking at `target` with world `up`.
    pub fn look_at(id: usize, eye: Vec3<f64>, target: Vec3<f64>, up: Vec3<f64>, width: usize, height: usize, fov_y_deg: f64) -> Self {
        let back = geometry::normalize(geometry::sub(eye, target));
        let right = geometry::normalize(geometry::cross(up, back));
        let upv = geometry::cross(back, right);
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Self {
            id,
            width,
            height,
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            c2w: [
                right[0], upv[0], back[0], eye[0], right[1], upv[1], back[1], eye[1], right[2], upv[2], back[2], eye[2],
                0.0, 0.0, 0.0, 1.0,
            ],
        }
    }

    /// Same view at another image size; intrinsics scale with it.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            width,
            height,
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            ..self.clone()
        }
    }

    /// Orbit camera looking at `target` from azimuth/elevation in degrees
    /// (azimuth about +z, measured from +x).
    pub fn orbit(id: usize, target: Vec3<f64>, azimuth_deg: f64, elevation_deg: f64, radius: f64, width: usize, height: usize, fov_y_deg: f64) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = [
            target[0] + radius * el.cos() * az.cos(),
            target[1] + radius * el.cos() * az.sin(),
            target[2] + radius * el.sin(),
        ];
        let up = if el.cos().abs() < 1e-9 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
        Self::look_at(id, eye, target, up, width, height, fov_y_deg)
    }

    /// Pixel coordinates `(u, v)` of a world point, `None` behind the
    /// camera.
    pub fn project(&self, p: Vec3<f64>) -> Option<[f64; 2]> {
        let r = self.rotation();
        let local = geometry::mat_vec(&geometry::transpose(&r), geometry::sub(p, self.position()));
        if local[2] >= 0.0 {
            return None;
        }
        let z = -local[2];
        Some([self.cx + self.fx * local[0] / z, self.cy - self.fy * local[1] / z])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3<f64>,
    pub dir: Vec3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3<f64> {
        geometry::add(self.origin, geometry::scale(self.dir, t))
    }

    /// Restricts `[near, far]` to the slab intersection with a box.
    pub fn clip(&self, lo: Vec3<f64>, hi: Vec3<f64>) -> Option<Ray> {
        let mut t0 = self.near;
        let mut t1 = self.far;
        for a in 0..3 {
            if self.dir[a].abs() < 1e-15 {
                if self.origin[a] < lo[a] || self.origin[a] > hi[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / self.dir[a];
            let (mut ta, mut tb) = ((lo[a] - self.origin[a]) * inv, (hi[a] - self.origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 < t1).then_some(Ray {
            near: t0,
            far: t1,
            ..*self
        })
    }
}

pub const DEFAULT_NEAR: f64 = 0.05;
pub const DEFAULT_FAR: f64 = 20.0;

/// Rays through the centers of the given `(column, row)` pixels.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    let r = camera.rotation();
    let o = camera.position();
    pixels
        .iter()
        .map(|&(u, v)| {
            if u >= camera.width || v >= camera.height {
                return Err(Error::InvalidArgument(format!(
                    "pixel ({u}, {v}) outside {}×{} camera {}",
                    camera.width, camera.height, camera.id
                )));
            }
            let local = [
                (u as f64 + 0.5 - camera.cx) / camera.fx,
                -(v as f64 + 0.5 - camera.cy) / camera.fy,
                -1.0,
            ];
            Ok(Ray {
                origin: o,
                dir: geometry::normalize(geometry::mat_vec(&r, local)),
                near: DEFAULT_NEAR,
                far: DEFAULT_FAR,
            })
        })
        .collect()
}

/// Every pixel in row-major order.
pub fn all_pixels(camera: &Camera) -> Vec<(usize, usize)> {
    (0..camera.height)
        .flat_map(|v| (0..camera.width).map(move |u| (u, v)))
        .collect()
}

/// Stratified sample placement.
pub enum Sampling<'a, R: Rng> {
    /// bin midpoints
    Midpoint,
    /// uniform jitter inside each bin
    Jittered(&'a mut R),
}

/// Sample distances and spacings along `[near, far]` with `n` equal bins.
/// The last spacing runs to `far`.
pub fn sample_ray<R: Rng>(ray: &Ray, n: usize, sampling: &mut Sampling<'_, R>) -> Result<(Vec<f64>, Vec<f64>)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples per ray, got {n}")));
    }
    if !(ray.near < ray.far) {
        return Err(Error::InvalidArgument(format!("ray near {} is not before far {}", ray.near, ray.far)));
    }
    let bin = (ray.far - ray.near) / n as f64;
    let t: Vec<f64> = (0..n)
        .map(|k| {
            let u = match sampling {
                Sampling::Midpoint => 0.5,
                Sampling::Jittered(rng) => rng.random::<f64>(),
            };
            ray.near + (k as f64 + u) * bin
        })
        .collect();
    let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    delta.push(ray.far - t[n - 1]);
    Ok((t, delta))
}

/// Box the rays are clipped to: the cloud bounds padded by `r` and
/// snapped outward to multiples of `r`, so small point motions leave the
/// sample positions unchanged.
pub fn clip_box(min: Vec3<f64>, max: Vec3<f64>, r: f64) -> (Vec3<f64>, Vec3<f64>) {
    let lo = min.map(|v| ((v - r) / r).floor() * r);
    let hi = max.map(|v| ((v + r) / r).ceil() * r);
    (lo, hi)
}

/// Uniform hash grid with cell size equal to the query radius.
pub struct HashGrid<'a> {
    points: &'a [Vec3<f64>],
    radius: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
}

impl<'a> HashGrid<'a> {
    pub fn build(points: &'a [Vec3<f64>], radius: f64) -> Self {
        assert!(radius > 0.0, "radius must be positive");
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(*p, radius)).or_default().push(i as u32);
        }
        Self { points, radius, cells }
    }

    #[inline]
    fn key(p: Vec3<f64>, r: f64) -> [i64; 3] {
        [(p[0] / r).floor() as i64, (p[1] / r).floor() as i64, (p[2] / r).floor() as i64]
    }

    /// Up to `k` points within the radius, nearest first, ties by index.
    pub fn query(&self, x: Vec3<f64>, k: usize) -> Vec<usize> {
        let r2 = self.radius * self.radius;
        let c = Self::key(x, self.radius);
        let mut found: Vec<(f64, usize)> = Vec::new();
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        for &i in ids {
                            let d2 = geometry::dist2(x, self.points[i as usize]);
                            if d2 <= r2 {
                                found.push((d2, i as usize));
                            }
                        }
                    }
                }
            }
        }
        found.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.truncate(k);
        found.into_iter().map(|(_, i)| i).collect()
    }
}

/// Reference scan for [`HashGrid::query`].
pub fn brute_force_neighbors(points: &[Vec3<f64>], x: Vec3<f64>, radius: f64, k: usize) -> Vec<usize> {
    let r2 = radius * radius;
    let mut found: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (geometry::dist2(x, *p), i))
        .filter(|(d2, _)| *d2 <= r2)
        .collect();
    found.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    found.truncate(k);
    found.into_iter().map(|(_, i)| i).collect()
}

/// Result of compositing one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite<T> {
    pub rgb: [T; 3],
    pub weights: Vec<T>,
    /// transmittance past the last sample
    pub residual: T,
}

/// Front-to-back compositing with the background behind the last sample.
pub fn composite<T: Scalar>(sigma: &[T], delta: &[T], colors: &[[T; 3]], background: [T; 3]) -> Composite<T> {
    assert_eq!(sigma.len(), delta.len());
    assert_eq!(sigma.len(), colors.len());
    let mut trans = T::one();
    let mut rgb = [T::zero(); 3];
    let mut weights = Vec::with_capacity(sigma.len());
    for k in 0..sigma.len() {
        let att = (-(sigma[k] * delta[k])).exp();
        let w = trans * (T::one() - att);
        for c in 0..3 {
            rgb[c] = rgb[c] + w * colors[k][c];
        }
        weights.push(w);
        trans = trans * att;
    }
    for c in 0..3 {
        rgb[c] = rgb[c] + trans * background[c];
    }
    Composite {
        rgb,
        weights,
        residual: trans,
    }
}

/// Differentiable compositing over a dense `[R, S]` sample layout.
/// `colors` is `[R, S, 3]`. Returns `(rgb [R,3], opacity [R,1])`.
pub fn composite_var<'t>(
    sigma: Var<'t, f64>,
    colors: Var<'t, f64>,
    delta: &Tensor<f64>,
    background: [f64; 3],
) -> Result<(Var<'t, f64>, Var<'t, f64>)> {
    let tape = sigma.tape();
    let shape = delta.shape().to_vec();
    let (r, s) = (shape[0], shape[1]);
    let mut upper = vec![0.0; s * s];
    for j in 0..s {
        for k in j + 1..s {
            upper[j * s + k] = 1.0;
        }
    }
    let a = sigma.mul(tape.constant(delta.clone()))?;
    let cum = a.matmul(tape.constant(Tensor::new(&[s, s], upper)?))?;
    let trans = cum.neg().exp();
    let alpha = a.neg().exp().neg().add_scalar(1.0);
    let w = trans.mul(alpha)?;
    let rgb = w.reshape(&[r, 1, s])?.matmul(colors)?.reshape(&[r, 3])?;
    let resid = a.sum_last().neg().exp().reshape(&[r, 1])?;
    let bg = tape.constant(Tensor::new(&[1, 3], background.to_vec())?);
    let rgb = rgb.add(resid.matmul(bg)?)?;
    Ok((rgb, resid.neg().add_scalar(1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub neighbors: usize,
    /// `None` derives the radius from the point spacing
    pub radius: Option<f64>,
    pub samples: usize,
    pub pos_bands: usize,
    pub dir_bands: usize,
    pub embed_hidden: Vec<usize>,
    pub embed_out: usize,
    pub color_hidden: Vec<usize>,
    pub background: [f64; 3],
    /// initial density inside the cloud
    pub initial_density: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            neighbors: 8,
            radius: None,
            samples: 32,
            pos_bands: 4,
            dir_bands: 2,
            embed_hidden: vec![32],
            embed_out: 32,
            color_hidden: vec![32],
            background: [1.0; 3],
            initial_density: 30.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 {
            return Err(Error::InvalidArgument("neighbor count must be at least 1".into()));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0) {
                return Err(Error::InvalidArgument(format!("query radius must be positive, got {r}")));
            }
        }
        if self.samples < 2 {
            return Err(Error::InvalidArgument("need at least 2 samples per ray".into()));
        }
        Ok(())
    }
}

/// Embedding, density and color networks.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderModel {
    pub config: RenderConfig,
    pub radius: f64,
    pub embed: Mlp<f64>,
    pub density: Mlp<f64>,
    pub color: Mlp<f64>,
}

/// Networks bound to a tape.
pub struct BoundRender<'t> {
    pub embed: MlpVars<'t, f64>,
    pub density: MlpVars<'t, f64>,
    pub color: MlpVars<'t, f64>,
}

impl BoundRender<'_> {
    pub fn vars(&self) -> Vec<Var<'_, f64>> {
        let mut v = self.embed.vars();
        v.extend(self.density.vars());
        v.extend(self.color.vars());
        v
    }
}

/// Output of [`RenderModel::render_rays`].
pub struct RayOutput<'t> {
    pub rgb: Var<'t, f64>,
    pub opacity: Var<'t, f64>,
    pub active_samples: usize,
    pub pairs: usize,
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl RenderModel {
    pub fn new(config: RenderConfig, feature_dim: usize, radius: f64, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument(format!("query radius must be positive, got {radius}")));
        }
        let mut sizes = vec![feature_dim + posenc_dim(3, config.pos_bands)];
        sizes.extend(&config.embed_hidden);
        sizes.push(config.embed_out);
        let embed = Mlp::new(&sizes, rng);
        let mut density = Mlp::new(&[config.embed_out, 1], rng);
        {
            let d = density.last_mut();
            d.weight = d.weight.map(|w| w * 0.01);
            d.bias = Tensor::from_vec(vec![inverse_softplus(config.initial_density)]);
        }
        let mut sizes = vec![config.embed_out + posenc_dim(3, config.dir_bands)];
        sizes.extend(&config.color_hidden);
        sizes.push(3);
        let color = Mlp::new(&sizes, rng);
        Ok(Self {
            config,
            radius,
            embed,
            density,
            color,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape<f64>, trainable: bool) -> BoundRender<'t> {
        BoundRender {
            embed: self.embed.bind(tape, trainable),
            density: self.density.bind(tape, trainable),
            color: self.color.bind(tape, trainable),
        }
    }

    /// Per-pair features `Φ_p(f_i, γ(R̄_i⁻¹ (x − p_i)))`. `offsets` is
    /// `x − p_i` `[M,3]` and `inv_rot` the matching `[M,9]` inverses.
    pub fn embed_pairs<'t>(
        &self,
        net: &BoundRender<'t>,
        features: Var<'t, f64>,
        offsets: Var<'t, f64>,
        inv_rot: Var<'t, f64>,
    ) -> Result<Var<'t, f64>> {
        let m = offsets.shape()[0];
        let local = inv_rot
            .reshape(&[m, 3, 3])?
            .matmul(offsets.reshape(&[m, 3, 1])?)?
            .reshape(&[m, 3])?;
        let enc = posenc(local, self.config.pos_bands)?;
        let x = offsets.tape().concat(&[features, enc], 1)?;
        Ok(net.embed.forward(x)?)
    }

    /// Inverse-distance weights normalized within each sample's
    /// neighborhood, `[M,1]`.
    pub fn idw_weights<'t>(offsets: Var<'t, f64>, sample_of_pair: &[usize], samples: usize) -> Result<Var<'t, f64>> {
        let m = offsets.shape()[0];
        let tape = offsets.tape();
        let dist = offsets.square().sum_last().sqrt().reshape(&[m, 1])?;
        let inv = tape.scalar(1.0).div(dist.add_scalar(IDW_EPS))?;
        let den = inv.scatter_add_rows(sample_of_pair, samples)?.gather_rows(sample_of_pair)?;
        Ok(inv.div(den)?)
    }

    /// Renders `rays` against a warped cloud. `points` `[N,3]`, `blended`
    /// `[N,12]` and `features` `[N,F]` live on the same tape as `net`.
    #[allow(clippy::too_many_arguments)]
    pub fn render_rays<'t, R: Rng>(
        &self,
        net: &BoundRender<'t>,
        points: Var<'t, f64>,
        blended: Var<'t, f64>,
        features: Var<'t, f64>,
        rays: &[Ray],
        sampling: &mut Sampling<'_, R>,
    ) -> Result<RayOutput<'t>> {
        let tape = points.tape();
        let s = self.config.samples;
        let nr = rays.len();
        let pts_val = points.value();
        let pts: Vec<Vec3<f64>> = pts_val.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let mut delta = vec![0.0; nr * s];
        let mut slot_of_active = Vec::new();
        let mut active_pos: Vec<f64> = Vec::new();
        let mut active_dir: Vec<f64> = Vec::new();
        let mut pair_pt = Vec::new();
        let mut pair_s = Vec::new();
        let mut pair_x: Vec<f64> = Vec::new();
        if let Some(b) = crate::voxel_seed::bounds_of(&pts) {
            let r = self.radius;
            let (lo, hi) = clip_box(b.min, b.max, r);
            let grid = HashGrid::build(&pts, r);
            for (ri, ray) in rays.iter().enumerate() {
                let Some(clipped) = ray.clip(lo, hi) else {
                    continue;
                };
                let (ts, ds) = sample_ray(&clipped, s, sampling)?;
                let denc = posenc_values(&ray.dir, self.config.dir_bands);
                for k in 0..s {
                    delta[ri * s + k] = ds[k];
                    let x = clipped.at(ts[k]);
                    let nb = grid.query(x, self.config.neighbors);
                    if nb.is_empty() {
                        continue;
                    }
                    let a = slot_of_active.len();
                    slot_of_active.push(ri * s + k);
                    active_pos.extend_from_slice(&x);
                    active_dir.extend_from_slice(&denc);
                    for i in nb {
                        pair_pt.push(i);
                        pair_s.push(a);
                        pair_x.extend_from_slice(&x);
                    }
                }
            }
        }
        let na = slot_of_active.len();
        let delta = Tensor::new(&[nr, s], delta)?;
        if na == 0 {
            let bg = Tensor::new(&[nr, 3], self.config.background.repeat(nr))?;
            return Ok(RayOutput {
                rgb: tape.constant(bg),
                opacity: tape.constant(Tensor::zeros(&[nr, 1])),
                active_samples: 0,
                pairs: 0,
            });
        }
        let m = pair_pt.len();
        let inv_rot = blended.select_cols(&[0, 1, 2, 3, 4, 5, 6, 7, 8])?.mat3_inverse()?;
        let p = points.gather_rows(&pair_pt)?;
        let offsets = tape.constant(Tensor::new(&[m, 3], pair_x)?).sub(p)?;
        let h = self.embed_pairs(
            net,
            features.gather_rows(&pair_pt)?,
            offsets,
            inv_rot.gather_rows(&pair_pt)?,
        )?;
        let w = Self::idw_weights(offsets, &pair_s, na)?;
        let fx = h.mul(w)?.scatter_add_rows(&pair_s, na)?;
        let sigma = net.density.forward(fx)?.softplus();
        let dirs = tape.constant(Tensor::new(&[na, posenc_dim(3, self.config.dir_bands)], active_dir)?);
        let color = net.color.forward(tape.concat(&[fx, dirs], 1)?)?.sigmoid();
        let sigma_dense = sigma.scatter_add_rows(&slot_of_active, nr * s)?.reshape(&[nr, s])?;
        let color_dense = color.scatter_add_rows(&slot_of_active, nr * s)?.reshape(&[nr, s, 3])?;
        let (rgb, opacity) = composite_var(sigma_dense, color_dense, &delta, self.config.background)?;
        Ok(RayOutput {
            rgb,
            opacity,
            active_samples: na,
            pairs: m,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cam() -> Camera {
        let mut c = Camera::look_at(0, [0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 8, 6, 40.0);
        c.cx = 3.5;
        c.cy = 2.5;
        c
    }

    #[test]
    fn clip_box_is_padded_and_snapped() {
        let (lo, hi) = clip_box([-0.33, 0.0, 0.41], [0.22, 0.05, 0.52], 0.1);
        for a in 0..3 {
            assert!(lo[a] <= [-0.43, -0.1, 0.31][a] + 1e-12);
            assert!(hi[a] >= [0.32, 0.15, 0.62][a] - 1e-12);
        }
        assert_eq!(clip_box([-0.33, 0.0, 0.41], [0.22, 0.05, 0.52], 0.1), clip_box([-0.33 + 1e-6, 1e-6, 0.41], [0.22 - 1e-6, 0.05, 0.52 + 1e-6], 0.1));
    }

    #[test]
    fn resize_keeps_rays() {
        let c = cam();
        let big = c.resized(16, 12);
        assert_eq!((big.fx, big.fy, big.cx, big.cy), (2.0 * c.fx, 2.0 * c.fy, 2.0 * c.cx, 2.0 * c.cy));
        // pixel (u, v) at the small size covers (2u + 0.5, 2v + 0.5) at the large one
        let a = generate_rays(&c, &[(3, 2)]).unwrap()[0].dir;
        let p = c.position();
        let on_ray = geometry::add(p, a);
        let uv = big.project(on_ray).unwrap();
        assert!((uv[0] - 7.0).abs() < 1e-9 && (uv[1] - 5.0).abs() < 1e-9, "{uv:?}");
        assert_eq!(c.resized(8, 6), c);
    }

    #[test]
    fn orbit_looks_at_target() {
        for (az, el) in [(0.0, 0.0), (90.0, 30.0), (200.0, -45.0), (10.0, 90.0)] {
            let c = Camera::orbit(3, [0.1, 0.2, 0.3], az, el, 2.5, 16, 16, 40.0);
            c.validate().unwrap();
            let o = c.position();
            assert!((geometry::norm(geometry::sub(o, [0.1, 0.2, 0.3])) - 2.5).abs() < 1e-12);
            let uv = c.project([0.1, 0.2, 0.3]).unwrap();
            assert!((uv[0] - c.cx).abs() < 1e-9 && (uv[1] - c.cy).abs() < 1e-9);
        }
        let c = Camera::orbit(0, [0.0; 3], 90.0, 0.0, 3.0, 8, 8, 40.0);
        let o = c.position();
        assert!(o[0].abs() < 1e-12 && (o[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn principal_ray_is_forward() {
        let c = cam();
        let r = generate_rays(&c, &[(3, 2)]).unwrap();
        let fwd = [-c.c2w[2], -c.c2w[6], -c.c2w[10]];
        for a in 0..3 {
            assert!((r[0].dir[a] - fwd[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn adjacent_pixels_differ_in_camera_x() {
        let c = cam();
        let r = generate_rays(&c, &[(3, 2), (4, 2)]).unwrap();
        let rt = geometry::transpose(&c.rotation());
        let a = geometry::mat_vec(&rt, r[0].dir);
        let b = geometry::mat_vec(&rt, r[1].dir);
        // compare unnormalized camera-space directions at z = -1
        let (a, b) = (geometry::scale(a, -1.0 / a[2]), geometry::scale(b, -1.0 / b[2]));
        assert!((a[0] - b[0]).abs() > 1e-6);
        assert!((a[1] - b[1]).abs() < 1e-12);
    }

    #[test]
    fn project_round_trip() {
        let c = cam();
        for (u, v) in all_pixels(&c) {
            let r = generate_rays(&c, &[(u, v)]).unwrap()[0];
            let p = c.project(r.at(2.3)).unwrap();
            assert!((p[0] - (u as f64 + 0.5)).abs() < 1e-6);
            assert!((p[1] - (v as f64 + 0.5)).abs() < 1e-6);
        }
        assert!(generate_rays(&c, &[(8, 0)]).is_err());
    }

    #[test]
    fn midpoint_sampling_arithmetic() {
        let ray = Ray {
            origin: [0.0; 3],
            dir: [0.0, 0.0, 1.0],
            near: 0.0,
            far: 1.0,
        };
        let (t, d) = sample_ray::<rand_chacha::ChaCha8Rng>(&ray, 2, &mut Sampling::Midpoint).unwrap();
        assert_eq!(t, vec![0.25, 0.75]);
        assert_eq!(d, vec![0.5, 0.25]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (_, d) = sample_ray(&ray, 16, &mut Sampling::Jittered(&mut rng)).unwrap();
        assert!(d.iter().all(|&x| x > 0.0));
        assert!(d.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn compositing_closed_forms() {
        let c = composite(&[1.0f64], &[1.0], &[[1.0, 0.0, 0.0]], [0.0; 3]);
        assert!((c.rgb[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        let e = composite(&[0.0f64; 4], &[0.3; 4], &[[0.2, 0.4, 0.6]; 4], [0.9, 0.8, 0.7]);
        assert_eq!(e.rgb, [0.9, 0.8, 0.7]);
    }

    #[test]
    fn tape_compositing_matches_plain() {
        let sigma = [0.5, 2.0, 0.0, 7.0];
        let delta = [0.1, 0.2, 0.3, 0.4];
        let cols = [[0.1, 0.2, 0.3], [0.9, 0.1, 0.5], [0.3, 0.3, 0.3], [0.0, 1.0, 0.2]];
        let plain = composite(&sigma, &delta, &cols, [1.0; 3]);
        let tape = Tape::new();
        let s = tape.constant(Tensor::new(&[1, 4], sigma.to_vec()).unwrap());
        let c = tape.constant(Tensor::new(&[1, 4, 3], cols.concat()).unwrap());
        let (rgb, op) = composite_var(s, c, &Tensor::new(&[1, 4], delta.to_vec()).unwrap(), [1.0; 3]).unwrap();
        for k in 0..3 {
            assert!((rgb.value().data()[k] - plain.rgb[k]).abs() < 1e-14);
        }
        assert!((op.item() - (1.0 - plain.residual)).abs() < 1e-14);
    }

    #[test]
    fn neighbor_examples() {
        let pts: Vec<Vec3<f64>> = vec![[0.0; 3], [0.05, 0.0, 0.0], [0.0, 0.05, 0.0], [5.0, 5.0, 5.0]];
        let g = HashGrid::build(&pts, 0.1);
        assert_eq!(g.query([0.0; 3], 8), vec![0, 1, 2]);
        assert!(g.query([2.0, 2.0, 2.0], 8).is_empty());
        assert_eq!(g.query([0.0; 3], 2), vec![0, 1]);
    }

    #[test]
    fn idw_single_and_symmetric() {
        let tape = Tape::new();
        let off = tape.constant(Tensor::new(&[3, 3], vec![0.1, 0.0, 0.0, 0.0, 0.2, 0.0, 0.0, -0.2, 0.0]).unwrap());
        let w = RenderModel::idw_weights(off, &[0, 1, 1], 2).unwrap();
        let v = w.value();
        assert_eq!(v.data()[0], 1.0);
        assert!((v.data()[1] - 0.5).abs() < 1e-15 && (v.data()[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_cloud_renders_background() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let model = RenderModel::new(RenderConfig::default(), 8, 0.05, &mut rng).unwrap();
        let tape = Tape::new();
        let net = model.bind(&tape, false);
        let pts = tape.constant(Tensor::zeros(&[0, 3]));
        let bl = tape.constant(Tensor::zeros(&[0, 12]));
        let f = tape.constant(Tensor::zeros(&[0, 8]));
        let rays = generate_rays(&cam(), &[(0, 0), (3, 3)]).unwrap();
        let out = model
            .render_rays::<rand_chacha::ChaCha8Rng>(&net, pts, bl, f, &rays, &mut Sampling::Midpoint)
            .unwrap();
        assert!(out.rgb.value().data().iter().all(|&v| v == 1.0));
        assert!(out.opacity.value().data().iter().all(|&v| v == 0.0));
    }
}
