//! Canonical feature point cloud extraction from a density grid.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Default density cutoff for occupied samples.
pub const DEFAULT_DENSITY_THRESHOLD: f64 = 0.05;
pub const DEFAULT_FEATURE_DIM: usize = 32;
const MIN_RESOLUTION: usize = 16;
const MAX_RESOLUTION: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3<f64>,
    pub max: Vec3<f64>,
}

impl Aabb {
    pub fn new(min: Vec3<f64>, max: Vec3<f64>) -> Self {
        Self { min, max }
    }

    pub fn cube(half: f64) -> Self {
        Self::new([-half; 3], [half; 3])
    }

    pub fn extent(&self) -> Vec3<f64> {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn contains(&self, p: Vec3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Regular scalar field sampled at voxel centers.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub dims: [usize; 3],
    pub bbox: Aabb,
    /// x fastest, then y, then z
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(dims: [usize; 3], bbox: Aabb, values: Vec<f64>) -> Result<Self> {
        let grid = Self { dims, bbox, values };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidArgument(format!(
                "density grid dims must be at least 2 per axis, got {:?}",
                self.dims
            )));
        }
        if self.values.len() != self.dims.iter().product::<usize>() {
            return Err(Error::InvalidArgument(format!(
                "density grid has {} values for dims {:?}",
                self.values.len(),
                self.dims
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "density value {} at voxel {} is not finite and non-negative",
                self.values[i], i
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn voxel_size(&self) -> Vec3<f64> {
        let e = self.bbox.extent();
        [
            e[0] / self.dims[0] as f64,
            e[1] / self.dims[1] as f64,
            e[2] / self.dims[2] as f64,
        ]
    }

    pub fn center(&self, x: usize, y: usize, z: usize) -> Vec3<f64> {
        voxel_center(&self.bbox, self.dims, [x, y, z])
    }

    /// Trilinear interpolation between voxel centers, clamped at the border.
    pub fn sample(&self, p: Vec3<f64>) -> f64 {
        let vs = self.voxel_size();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = ((p[a] - self.bbox.min[a]) / vs[a] - 0.5).clamp(0.0, (self.dims[a] - 1) as f64);
            let i = (u.floor() as usize).min(self.dims[a] - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                acc += w * self.values[self.index(base[0] + off[0], base[1] + off[1], base[2] + off[2])];
            }
        }
        acc
    }

    /// Resamples onto `dims` voxel centers over the same bounds.
    pub fn resample(&self, dims: [usize; 3]) -> DensityGrid {
        if dims == self.dims {
            return self.clone();
        }
        let mut values = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    values.push(self.sample(voxel_center(&self.bbox, dims, [x, y, z])));
                }
            }
        }
        DensityGrid {
            dims,
            bbox: self.bbox,
            values,
        }
    }

    pub fn count_above(&self, threshold: f64) -> usize {
        self.values.iter().filter(|&&v| v > threshold).count()
    }
}

pub fn voxel_center(bbox: &Aabb, dims: [usize; 3], idx: [usize; 3]) -> Vec3<f64> {
    let e = bbox.extent();
    [
        bbox.min[0] + (idx[0] as f64 + 0.5) * e[0] / dims[0] as f64,
        bbox.min[1] + (idx[1] as f64 + 0.5) * e[1] / dims[1] as f64,
        bbox.min[2] + (idx[2] as f64 + 0.5) * e[2] / dims[2] as f64,
    ]
}

/// Samples `field` at every voxel center.
pub fn rasterize_field(field: impl Fn(Vec3<f64>) -> f64, dims: [usize; 3], bbox: Aabb) -> Result<DensityGrid> {
    let mut values = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                values.push(field(voxel_center(&bbox, dims, [x, y, z])));
            }
        }
    }
    DensityGrid::new(dims, bbox, values)
}

/// Canonical points with per-point feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePointCloud {
    pub points: Vec<Vec3<f64>>,
    /// `[N, F]`
    pub features: Tensor<f64>,
}

impl FeaturePointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.last_dim()
    }

    pub fn points_tensor(&self) -> Tensor<f64> {
        Tensor::new(&[self.len(), 3], self.points.iter().flatten().copied().collect()).expect("n×3")
    }

    pub fn bounds(&self) -> Option<Aabb> {
        bounds_of(&self.points)
    }
}

pub fn bounds_of(points: &[Vec3<f64>]) -> Option<Aabb> {
    let first = *points.first()?;
    let mut b = Aabb::new(first, first);
    for p in points {
        for a in 0..3 {
            b.min[a] = b.min[a].min(p[a]);
            b.max[a] = b.max[a].max(p[a]);
        }
    }
    Some(b)
}

/// Outcome of [`extract_points`].
#[derive(Clone, Debug)]
pub struct Extraction {
    pub cloud: FeaturePointCloud,
    /// grid the points were taken from
    pub grid: DensityGrid,
    pub resolution: usize,
}

/// Thresholds the grid at an adaptively chosen resolution and places one
/// point per surviving voxel center.
///
/// The resolution doubles from 16 until at least half the target survives
/// (capped at 128). If that overshoots twice the target, the resolution is
/// bisected back down between the last two candidates.
pub fn extract_points(
    grid: &DensityGrid,
    threshold: f64,
    target_count: usize,
    feature_dim: usize,
    rng: &mut impl Rng,
) -> Result<Extraction> {
    if threshold <= 0.0 || !threshold.is_finite() {
        return Err(Error::InvalidArgument(format!("density threshold must be positive, got {threshold}")));
    }
    if target_count == 0 {
        return Err(Error::InvalidArgument("target point count must be positive".into()));
    }
    grid.validate()?;
    let lo_target = target_count as f64 * 0.5;
    let hi_target = target_count as f64 * 2.0;
    let count_at = |r: usize| grid.resample([r; 3]).count_above(threshold);

    let mut res = MIN_RESOLUTION;
    let mut prev = None;
    let mut count = count_at(res);
    while (count as f64) < lo_target && res < MAX_RESOLUTION {
        prev = Some(res);
        res = (res * 2).min(MAX_RESOLUTION);
        count = count_at(res);
    }
    if count as f64 > hi_target {
        if let Some(mut lo) = prev {
            let mut hi = res;
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                let c = count_at(mid);
                if c as f64 > hi_target {
                    hi = mid;
                } else {
                    lo = mid;
                    res = mid;
                    count = c;
                    if c as f64 >= lo_target {
                        break;
                    }
                }
            }
            if count as f64 > hi_target {
                res = lo;
                count = count_at(lo);
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyScene(format!(
            "no voxel exceeds density threshold {threshold} at resolution {res}"
        )));
    }

    let chosen = grid.resample([res; 3]);
    let points = occupied_centers(&chosen, threshold);
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let feats = (0..points.len() * feature_dim).map(|_| normal.sample(rng)).collect();
    let cloud = FeaturePointCloud {
        features: Tensor::new(&[points.len(), feature_dim], feats)?,
        points,
    };
    Ok(Extraction {
        cloud,
        grid: chosen,
        resolution: res,
    })
}

/// Voxel centers with density strictly above `threshold`, in storage order.
pub fn occupied_centers(grid: &DensityGrid, threshold: f64) -> Vec<Vec3<f64>> {
    let mut out = Vec::new();
    for z in 0..grid.dims[2] {
        for y in 0..grid.dims[1] {
            for x in 0..grid.dims[0] {
                if grid.values[grid.index(x, y, z)] > threshold {
                    out.push(grid.center(x, y, z));
                }
            }
        }
    }
    out
}

/// Occupancy volume on the same lattice as a [`DensityGrid`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryVolume {
    pub dims: [usize; 3],
    pub occ: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CleanVolume {
    pub volume: BinaryVolume,
    pub bbox: Aabb,
}

impl BinaryVolume {
    pub fn new(dims: [usize; 3]) -> Self {
        Self {
            dims,
            occ: vec![false; dims.iter().product()],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let y = (i / self.dims[0]) % self.dims[1];
        let z = i / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    /// Occupancy at signed coordinates; outside is empty.
    #[inline]
    pub fn get(&self, x: isize, y: isize, z: isize) -> bool {
        if x < 0 || y < 0 || z < 0 {
            return false;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= self.dims[0] || y >= self.dims[1] || z >= self.dims[2] {
            return false;
        }
        self.occ[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.index(x, y, z);
        self.occ[i] = v;
    }

    pub fn count(&self) -> usize {
        self.occ.iter().filter(|&&b| b).count()
    }

    /// Voxel indices grouped into connected components (26- or 6-connected).
    pub fn components(&self, full_26: bool) -> Vec<Vec<usize>> {
        let offsets = neighbor_offsets(full_26);
        let mut label = vec![usize::MAX; self.occ.len()];
        let mut comps = Vec::new();
        let mut stack = Vec::new();
        for start in 0..self.occ.len() {
            if !self.occ[start] || label[start] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut members = Vec::new();
            label[start] = id;
            stack.push(start);
            while let Some(i) = stack.pop() {
                members.push(i);
                let [x, y, z] = self.coords(i);
                for &[dx, dy, dz] in &offsets {
                    let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if self.get(nx, ny, nz) {
                        let j = self.index(nx as usize, ny as usize, nz as usize);
                        if label[j] == usize::MAX {
                            label[j] = id;
                            stack.push(j);
                        }
                    }
                }
            }
            members.sort_unstable();
            comps.push(members);
        }
        comps
    }
}

pub(crate) fn neighbor_offsets(full_26: bool) -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    for dz in -1..=1isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                if manhattan == 0 || (!full_26 && manhattan != 1) {
                    continue;
                }
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// Fills cavities unreachable from the volume border (6-connected
/// background flood fill).
pub fn fill_holes(vol: &BinaryVolume) -> BinaryVolume {
    let d = vol.dims;
    let mut outside = vec![false; vol.occ.len()];
    let mut stack = Vec::new();
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let border = x == 0 || y == 0 || z == 0 || x == d[0] - 1 || y == d[1] - 1 || z == d[2] - 1;
                let i = vol.index(x, y, z);
                if border && !vol.occ[i] && !outside[i] {
                    outside[i] = true;
                    stack.push(i);
                }
            }
        }
    }
    let offsets = neighbor_offsets(false);
    while let Some(i) = stack.pop() {
        let [x, y, z] = vol.coords(i);
        for &[dx, dy, dz] in &offsets {
            let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
            if nx < 0 || ny < 0 || nz < 0 {
                continue;
            }
            let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
            if nx >= d[0] || ny >= d[1] || nz >= d[2] {
                continue;
            }
            let j = vol.index(nx, ny, nz);
            if !vol.occ[j] && !outside[j] {
                outside[j] = true;
                stack.push(j);
            }
        }
    }
    BinaryVolume {
        dims: d,
        occ: outside.iter().map(|&o| !o).collect(),
    }
}

/// Keeps only the largest 26-connected component (lowest voxel index wins
/// ties).
pub fn largest_component(vol: &BinaryVolume) -> BinaryVolume {
    let comps = vol.components(true);
    let mut out = BinaryVolume::new(vol.dims);
    if let Some(best) = comps.iter().max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0]))) {
        for &i in best {
            out.occ[i] = true;
        }
    }
    out
}

pub fn threshold(grid: &DensityGrid, tau: f64) -> BinaryVolume {
    BinaryVolume {
        dims: grid.dims,
        occ: grid.values.iter().map(|&v| v > tau).collect(),
    }
}

/// Thresholds, fills interior holes and retains the largest blob.
pub fn binarize_and_clean(grid: &DensityGrid, tau: f64) -> Result<CleanVolume> {
    let vol = threshold(grid, tau);
    if vol.count() == 0 {
        return Err(Error::EmptyScene(format!("no voxel exceeds density threshold {tau}")));
    }
    let vol = largest_component(&fill_holes(&vol));
    Ok(CleanVolume {
        volume: vol,
        bbox: grid.bbox,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(3)
    }

    fn unit_box(p: Vec3<f64>) -> f64 {
        if p.iter().all(|c| c.abs() <= 0.5) {
            1.0
        } else {
            0.0
        }
    }

    #[test]
    fn rasterize_unit_box() {
        let g = rasterize_field(unit_box, [16; 3], Aabb::cube(0.5)).unwrap();
        assert_eq!(g.values.len(), 4096);
        assert!(g.values.iter().all(|&v| v == 1.0));
        let e = rasterize_field(|_| 0.0, [8; 3], Aabb::cube(1.0)).unwrap();
        assert!(e.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_invalid_grids() {
        assert!(DensityGrid::new([1, 4, 4], Aabb::cube(1.0), vec![0.0; 16]).is_err());
        assert!(DensityGrid::new([2, 2, 2], Aabb::cube(1.0), vec![-1.0; 8]).is_err());
    }

    #[test]
    fn capsule_volume_within_twenty_percent() {
        let r = 0.1;
        let half = 0.5;
        let capsule = |p: Vec3<f64>| {
            let x = p[0].clamp(-half, half);
            let d = ((p[0] - x).powi(2) + p[1] * p[1] + p[2] * p[2]).sqrt();
            if d <= r {
                1.0
            } else {
                0.0
            }
        };
        let bbox = Aabb::new([-0.65, -0.12, -0.12], [0.65, 0.12, 0.12]);
        let g = rasterize_field(capsule, [32; 3], bbox).unwrap();
        let vs = g.voxel_size();
        let voxel = vs[0] * vs[1] * vs[2];
        let measured = g.count_above(0.5) as f64 * voxel;
        let pi = std::f64::consts::PI;
        let analytic = pi * r * r * (2.0 * half) + 4.0 / 3.0 * pi * r.powi(3);
        assert!((measured - analytic).abs() / analytic < 0.2, "{measured} vs {analytic}");
    }

    #[test]
    fn empty_grid_is_an_empty_scene() {
        let g = rasterize_field(|_| 0.0, [8; 3], Aabb::cube(1.0)).unwrap();
        assert!(matches!(extract_points(&g, 0.05, 100, 8, &mut rng()), Err(Error::EmptyScene(_))));
        assert!(matches!(binarize_and_clean(&g, 0.05), Err(Error::EmptyScene(_))));
    }

    #[test]
    fn solid_box_hits_target_range() {
        let g = rasterize_field(unit_box, [64; 3], Aabb::cube(1.0)).unwrap();
        let ex = extract_points(&g, 0.05, 10_000, 32, &mut rng()).unwrap();
        let n = ex.cloud.len();
        assert!((5_000..=20_000).contains(&n), "{n} points at resolution {}", ex.resolution);
        assert_eq!(ex.cloud.features.shape(), &[n, 32]);
        for p in &ex.cloud.points {
            assert!(Aabb::cube(1.0).contains(*p));
            assert!(ex.grid.sample(*p) > 0.05);
        }
    }

    #[test]
    fn hole_is_filled() {
        let mut v = BinaryVolume::new([5, 5, 5]);
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    v.set(x, y, z, true);
                }
            }
        }
        v.set(2, 2, 2, false);
        let f = fill_holes(&v);
        assert!(f.occ[f.index(2, 2, 2)]);
        assert_eq!(f.count(), 27);
    }
}
