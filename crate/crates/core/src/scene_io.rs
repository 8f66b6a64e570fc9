//! Dataset layout, synthetic articulated scenes, PNG helpers and the
//! `.apck` checkpoint container.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{ColorType, ImageEncoder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::kinematics::{forward_kinematics, BonePose, Pose, PoseRegressor, SkinningWeights};
use crate::model::ArticulatedModel;
use crate::nn::{Linear, Mlp};
use crate::render::{all_pixels, composite_var, generate_rays, Camera, RenderConfig, RenderModel, Sampling};
use crate::skeleton::Skeleton;
use crate::trainer::OptimizerState;
use crate::voxel_seed::{rasterize_field, Aabb, DensityGrid};

// ---------------------------------------------------------------- images

pub fn encode_png_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(rgb, width as u32, height as u32, ColorType::Rgb8.into())
        .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_file(path, &encode_png_rgb(width, height, rgb)?)
}

pub fn write_png_gray(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(gray, width as u32, height as u32, ColorType::L8.into())
        .map_err(|e| Error::format(path, e))?;
    write_file(path, &out)
}

fn read_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "missing file")));
    }
    image::open(path).map_err(|e| Error::format(path, e))
}

/// `(width, height, rgb8)`
pub fn read_png_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = read_image(path)?.to_rgb8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

pub fn read_png_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = read_image(path)?.to_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

// --------------------------------------------------------------- dataset

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `[H·W·3]`
    pub rgb: Vec<u8>,
    /// `[H·W]`, 255 = foreground
    pub mask: Vec<u8>,
}

impl Frame {
    pub fn color(&self, pixel: usize) -> [f64; 3] {
        let p = &self.rgb[3 * pixel..3 * pixel + 3];
        [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]
    }
}

/// Synthetic-only reference data.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub skeleton: Skeleton,
    /// one pose per timestamp
    pub poses: Vec<Pose>,
    /// density at the canonical timestamp
    pub density: DensityGrid,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub timestamps: Vec<f64>,
    pub canonical_index: usize,
    /// views reserved for evaluation
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub holdout_views: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub meta: Meta,
    /// `[view][timestamp]`
    pub frames: Vec<Vec<Frame>>,
    pub ground_truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn num_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn num_timestamps(&self) -> usize {
        self.meta.timestamps.len()
    }

    pub fn train_views(&self) -> Vec<usize> {
        (0..self.cameras.len())
            .filter(|v| !self.meta.holdout_views.contains(v))
            .collect()
    }

    /// Held-out views, or every view when none are reserved.
    pub fn eval_views(&self) -> Vec<usize> {
        if self.meta.holdout_views.is_empty() {
            (0..self.cameras.len()).collect()
        } else {
            self.meta.holdout_views.clone()
        }
    }

    pub fn camera_by_id(&self, id: usize) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let ts = &self.meta.timestamps;
        if ts.is_empty() {
            return Err(Error::Dataset("no timestamps".into()));
        }
        if ts.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Dataset("timestamps must be strictly increasing".into()));
        }
        if ts.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Dataset("timestamps must lie in [0, 1]".into()));
        }
        if self.meta.canonical_index >= ts.len() {
            return Err(Error::Dataset(format!(
                "canonical index {} out of {} timestamps",
                self.meta.canonical_index,
                ts.len()
            )));
        }
        if self.cameras.is_empty() {
            return Err(Error::Dataset("no cameras".into()));
        }
        for (i, c) in self.cameras.iter().enumerate() {
            c.validate()?;
            if self.cameras[..i].iter().any(|d| d.id == c.id) {
                return Err(Error::Dataset(format!("duplicate camera id {}", c.id)));
            }
        }
        if let Some(&v) = self.meta.holdout_views.iter().find(|&&v| v >= self.cameras.len()) {
            return Err(Error::Dataset(format!("held-out view {v} has no camera")));
        }
        if self.train_views().is_empty() {
            return Err(Error::Dataset("every view is held out".into()));
        }
        if self.frames.len() != self.cameras.len() {
            return Err(Error::Dataset(format!(
                "{} cameras but frames for {} views",
                self.cameras.len(),
                self.frames.len()
            )));
        }
        for (v, row) in self.frames.iter().enumerate() {
            if row.len() != ts.len() {
                return Err(Error::Dataset(format!(
                    "view {v} has {} frames for {} timestamps",
                    row.len(),
                    ts.len()
                )));
            }
            let px = self.cameras[v].width * self.cameras[v].height;
            for (t, f) in row.iter().enumerate() {
                if f.rgb.len() != 3 * px || f.mask.len() != px {
                    return Err(Error::Dataset(format!("frame v{}_t{t} does not match its camera size", self.cameras[v].id)));
                }
            }
        }
        if let Some(gt) = &self.ground_truth {
            if gt.poses.len() != ts.len() {
                return Err(Error::Dataset("ground-truth poses do not cover every timestamp".into()));
            }
        }
        Ok(())
    }
}

fn frame_name(view_id: usize, t: usize) -> String {
    format!("v{view_id}_t{t}.png")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    write_file(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e))
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    write_json(&dir.join("cameras.json"), &ds.cameras)?;
    write_json(&dir.join("meta.json"), &ds.meta)?;
    for (v, row) in ds.frames.iter().enumerate() {
        let c = &ds.cameras[v];
        for (t, f) in row.iter().enumerate() {
            let name = frame_name(c.id, t);
            write_png_rgb(&dir.join("frames").join(&name), c.width, c.height, &f.rgb)?;
            write_png_gray(&dir.join("masks").join(&name), c.width, c.height, &f.mask)?;
        }
    }
    if let Some(gt) = &ds.ground_truth {
        let g = dir.join("gt");
        write_json(&g.join("skeleton.json"), &gt.skeleton)?;
        write_json(&g.join("poses.json"), &gt.poses)?;
        save_density(&gt.density, &g.join("density.bin"))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let cameras: Vec<Camera> = read_json(&dir.join("cameras.json"))?;
    let meta: Meta = read_json(&dir.join("meta.json"))?;
    let mut frames = Vec::with_capacity(cameras.len());
    for c in &cameras {
        let mut row = Vec::with_capacity(meta.timestamps.len());
        for t in 0..meta.timestamps.len() {
            let name = frame_name(c.id, t);
            let fp = dir.join("frames").join(&name);
            let (w, h, rgb) = read_png_rgb(&fp)?;
            let mp = dir.join("masks").join(&name);
            let (mw, mh, mask) = read_png_gray(&mp)?;
            if (w, h) != (c.width, c.height) {
                return Err(Error::format(fp, format!("image is {w}×{h}, camera {} is {}×{}", c.id, c.width, c.height)));
            }
            if (mw, mh) != (w, h) {
                return Err(Error::format(mp, format!("mask is {mw}×{mh}, frame is {w}×{h}")));
            }
            row.push(Frame { rgb, mask });
        }
        frames.push(row);
    }
    let g = dir.join("gt");
    let ground_truth = if g.join("skeleton.json").exists() {
        Some(GroundTruth {
            skeleton: read_json(&g.join("skeleton.json"))?,
            poses: read_json(&g.join("poses.json"))?,
            density: load_density(&g.join("density.bin"))?,
        })
    } else {
        None
    };
    let ds = Dataset {
        cameras,
        meta,
        frames,
        ground_truth,
    };
    ds.validate()?;
    Ok(ds)
}

const DENSITY_MAGIC: &[u8; 4] = b"APDG";

/// Grid dims (u64), box corners and values, all little-endian.
pub fn save_density(grid: &DensityGrid, path: &Path) -> Result<()> {
    let mut b = Vec::with_capacity(4 + 24 + 48 + 8 * grid.values.len());
    b.extend_from_slice(DENSITY_MAGIC);
    for d in grid.dims {
        b.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in grid.bbox.min.iter().chain(&grid.bbox.max).chain(&grid.values) {
        b.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &b)
}

pub fn load_density(path: &Path) -> Result<DensityGrid> {
    let b = fs::read(path).map_err(|e| Error::io(path, e))?;
    if b.len() < 76 || &b[..4] != DENSITY_MAGIC {
        return Err(Error::format(path, "not a density grid"));
    }
    let u = |k: usize| u64::from_le_bytes(b[4 + 8 * k..12 + 8 * k].try_into().expect("8 bytes")) as usize;
    let dims = [u(0), u(1), u(2)];
    let f = |off: usize| f64::from_le_bytes(b[off..off + 8].try_into().expect("8 bytes"));
    let corner = |k: usize| [f(28 + 24 * k), f(36 + 24 * k), f(44 + 24 * k)];
    let n = dims.iter().product::<usize>();
    if b.len() != 76 + 8 * n {
        return Err(Error::format(path, format!("expected {n} values for dims {dims:?}")));
    }
    let values = (0..n).map(|i| f(76 + 8 * i)).collect();
    DensityGrid::new(dims, Aabb::new(corner(0), corner(1)), values).map_err(|e| Error::format(path, e))
}

// ------------------------------------------------------------- synthetic

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Capsule { a: Vec3<f64>, b: Vec3<f64>, radius: f64 },
    Box { center: Vec3<f64>, half: Vec3<f64> },
}

impl Shape {
    /// Signed distance, negative inside.
    fn sdf(&self, p: Vec3<f64>) -> f64 {
        match self {
            Shape::Capsule { a, b, radius } => geometry::point_segment_distance(p, *a, *b) - radius,
            Shape::Box { center, half } => {
                let q: Vec<f64> = (0..3).map(|k| (p[k] - center[k]).abs() - half[k]).collect();
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                outside + q.iter().cloned().fold(f64::MIN, f64::max).min(0.0)
            }
        }
    }

    fn degenerate(&self) -> bool {
        match self {
            Shape::Capsule { radius, .. } => !(*radius > 0.0),
            Shape::Box { half, .. } => half.iter().any(|h| !(*h > 0.0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Part {
    #[serde(flatten)]
    pub shape: Shape,
    /// bone carrying the part, `None` for the root
    pub bone: Option<usize>,
    pub albedo: [f64; 3],
}

/// Sinusoidal angle `amplitude · sin(2π f (t − t_canonical) + phase)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub bone: usize,
    pub axis: Vec3<f64>,
    pub amplitude_deg: f64,
    pub frequency: f64,
    #[serde(default)]
    pub phase_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRing {
    pub radius: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    pub azimuth_offset_deg: f64,
    /// extra views placed between the training views
    pub holdout: usize,
}

impl Default for CameraRing {
    fn default() -> Self {
        Self {
            radius: 3.0,
            elevation_deg: 45.0,
            fov_deg: 40.0,
            azimuth_offset_deg: 30.0,
            holdout: 1,
        }
    }
}

fn default_density_scale() -> f64 {
    50.0
}
fn default_softness() -> f64 {
    0.01
}
fn default_grid() -> usize {
    64
}
fn default_march() -> usize {
    128
}
fn default_background() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRig {
    pub joints: Vec<Vec3<f64>>,
    pub parents: Vec<Option<usize>>,
    pub parts: Vec<Part>,
    pub motions: Vec<Motion>,
    #[serde(default)]
    pub canonical_index: usize,
    /// peak density inside a part
    #[serde(default = "default_density_scale")]
    pub density_scale: f64,
    /// width of the linear density ramp across part surfaces
    #[serde(default = "default_softness")]
    pub softness: f64,
    #[serde(default = "default_grid")]
    pub grid_resolution: usize,
    #[serde(default = "default_march")]
    pub march_samples: usize,
    #[serde(default = "default_background")]
    pub background: [f64; 3],
    #[serde(default)]
    pub cameras: CameraRing,
}

impl SyntheticRig {
    /// Upper arm and forearm capsules along x, swinging about z.
    pub fn two_joint_arm() -> Self {
        Self {
            joints: vec![[-0.6, 0.0, 0.0], [0.0, 0.0, 0.0], [0.6, 0.0, 0.0]],
            parents: vec![None, Some(0), Some(1)],
            parts: vec![
                Part {
                    shape: Shape::Capsule {
                        a: [-0.6, 0.0, 0.0],
                        b: [0.0, 0.0, 0.0],
                        radius: 0.12,
                    },
                    bone: Some(0),
                    albedo: [0.85, 0.3, 0.2],
                },
                Part {
                    shape: Shape::Capsule {
                        a: [0.0, 0.0, 0.0],
                        b: [0.6, 0.0, 0.0],
                        radius: 0.1,
                    },
                    bone: Some(1),
                    albedo: [0.2, 0.4, 0.85],
                },
            ],
            motions: vec![
                Motion {
                    bone: 0,
                    axis: [0.0, 0.0, 1.0],
                    amplitude_deg: 30.0,
                    frequency: 0.5,
                    phase_deg: 0.0,
                },
                Motion {
                    bone: 1,
                    axis: [0.0, 0.0, 1.0],
                    amplitude_deg: 45.0,
                    frequency: 1.0,
                    phase_deg: 0.0,
                },
            ],
            canonical_index: 0,
            density_scale: default_density_scale(),
            softness: default_softness(),
            grid_resolution: default_grid(),
            march_samples: default_march(),
            background: default_background(),
            cameras: CameraRing::default(),
        }
    }

    pub fn skeleton(&self) -> Result<Skeleton> {
        Skeleton::new(self.joints.clone(), self.parents.clone(), false)
    }

    fn validate(&self, skel: &Skeleton) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::InvalidArgument("rig has no parts".into()));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if p.shape.degenerate() {
                return Err(Error::InvalidArgument(format!("rig part {i} has zero volume")));
            }
            if let Some(b) = p.bone {
                if b >= skel.num_bones() {
                    return Err(Error::InvalidArgument(format!("rig part {i} bound to missing bone {b}")));
                }
            }
        }
        for m in &self.motions {
            if m.bone >= skel.num_bones() {
                return Err(Error::InvalidArgument(format!("motion for missing bone {}", m.bone)));
            }
            if geometry::norm(m.axis) < 1e-12 {
                return Err(Error::InvalidArgument(format!("motion for bone {} has a zero axis", m.bone)));
            }
        }
        if !(self.density_scale > 0.0 && self.softness > 0.0) || self.march_samples < 2 {
            return Err(Error::InvalidArgument("rig density, softness and sample count must be positive".into()));
        }
        Ok(())
    }

    /// Ground-truth pose at normalized time `t`.
    pub fn pose_at(&self, bones: usize, t: f64, t_canonical: f64) -> Pose {
        let mut pose = Pose::identity(bones);
        for m in &self.motions {
            let ang = m.amplitude_deg.to_radians()
                * (2.0 * std::f64::consts::PI * m.frequency * (t - t_canonical) + m.phase_deg.to_radians()).sin();
            pose.bones[m.bone] = BonePose {
                axis: geometry::normalize(m.axis),
                angle: ang,
            };
        }
        pose
    }

    /// Training views on a ring, held-out views halfway between them.
    pub fn cameras(&self, views: usize, width: usize, height: usize) -> Vec<Camera> {
        let ring = &self.cameras;
        let step = 360.0 / views.max(1) as f64;
        let az: Vec<f64> = (0..views)
            .map(|k| ring.azimuth_offset_deg + step * k as f64)
            .chain((0..ring.holdout).map(|h| ring.azimuth_offset_deg + step * (h as f64 + 0.5)))
            .collect();
        az.iter()
            .enumerate()
            .map(|(id, &a)| Camera::orbit(id, [0.0; 3], a, ring.elevation_deg, ring.radius, width, height, ring.fov_deg))
            .collect()
    }
}

/// Density and albedo of a posed rig.
pub struct RigField<'a> {
    rig: &'a SyntheticRig,
    inverse: Vec<geometry::Rigid<f64>>,
}

impl<'a> RigField<'a> {
    pub fn new(rig: &'a SyntheticRig, skeleton: &Skeleton, pose: &Pose) -> Result<Self> {
        let fk = forward_kinematics(skeleton, pose)?;
        let inverse = rig
            .parts
            .iter()
            .map(|p| match p.bone {
                Some(b) => fk.bones[b].inverse(),
                None => fk.root.inverse(),
            })
            .collect();
        Ok(Self { rig, inverse })
    }

    fn occupancy(&self, k: usize, p: Vec3<f64>) -> f64 {
        let d = self.rig.parts[k].shape.sdf(self.inverse[k].apply(p));
        (0.5 - d / self.rig.softness).clamp(0.0, 1.0)
    }

    pub fn density(&self, p: Vec3<f64>) -> f64 {
        let occ = (0..self.rig.parts.len()).map(|k| self.occupancy(k, p)).fold(0.0, f64::max);
        self.rig.density_scale * occ
    }

    /// Density with the albedo of the most occupied part.
    pub fn sample(&self, p: Vec3<f64>) -> (f64, [f64; 3]) {
        let mut best = (0.0, self.rig.background);
        for k in 0..self.rig.parts.len() {
            let o = self.occupancy(k, p);
            if o > best.0 {
                best = (o, self.rig.parts[k].albedo);
            }
        }
        (self.rig.density_scale * best.0, best.1)
    }
}

/// Ray-marched render of the analytic field, `(rgb, opacity)`.
pub fn render_field(field: &RigField<'_>, camera: &Camera) -> Result<(Vec<f64>, Vec<f64>)> {
    let rays = generate_rays(camera, &all_pixels(camera))?;
    let s = field.rig.march_samples;
    let mut rgb = Vec::with_capacity(3 * rays.len());
    let mut opacity = Vec::with_capacity(rays.len());
    for chunk in rays.chunks(512) {
        let r = chunk.len();
        let mut sig = vec![0.0; r * s];
        let mut col = vec![0.0; r * s * 3];
        let mut del = vec![0.0; r * s];
        for (i, ray) in chunk.iter().enumerate() {
            let Some(c) = ray.clip([-1.0; 3], [1.0; 3]) else {
                continue;
            };
            let (ts, ds) = crate::render::sample_ray::<rand_chacha::ChaCha8Rng>(&c, s, &mut Sampling::Midpoint)?;
            for k in 0..s {
                let (d, a) = field.sample(c.at(ts[k]));
                sig[i * s + k] = d;
                del[i * s + k] = ds[k];
                col[3 * (i * s + k)..3 * (i * s + k) + 3].copy_from_slice(&a);
            }
        }
        let tape = Tape::new();
        let (c, o) = composite_var(
            tape.constant(Tensor::new(&[r, s], sig)?),
            tape.constant(Tensor::new(&[r, s, 3], col)?),
            &Tensor::new(&[r, s], del)?,
            field.rig.background,
        )?;
        rgb.extend_from_slice(c.value().data());
        opacity.extend_from_slice(o.value().data());
    }
    Ok((rgb, opacity))
}

/// Renders frames and masks for every view and timestamp and records the
/// ground truth. Held-out views come after the `views` training views.
pub fn generate_synthetic(rig: &SyntheticRig, views: usize, timestamps: usize, width: usize, height: usize) -> Result<Dataset> {
    let skel = rig.skeleton()?;
    rig.validate(&skel)?;
    if views == 0 || timestamps == 0 || width == 0 || height == 0 {
        return Err(Error::InvalidArgument("views, timestamps and resolution must be positive".into()));
    }
    if rig.canonical_index >= timestamps {
        return Err(Error::InvalidArgument(format!(
            "canonical index {} out of {timestamps} timestamps",
            rig.canonical_index
        )));
    }
    if rig.motions.iter().all(|m| m.amplitude_deg == 0.0) {
        log::warn!("rig has no moving joint; every frame of a view will be identical");
    }
    let ts: Vec<f64> = if timestamps == 1 {
        vec![0.0]
    } else {
        (0..timestamps).map(|k| k as f64 / (timestamps - 1) as f64).collect()
    };
    let tc = ts[rig.canonical_index];
    let poses: Vec<Pose> = ts.iter().map(|&t| rig.pose_at(skel.num_bones(), t, tc)).collect();
    let cameras = rig.cameras(views, width, height);
    let mut frames = vec![Vec::with_capacity(timestamps); cameras.len()];
    for pose in &poses {
        let field = RigField::new(rig, &skel, pose)?;
        for (v, cam) in cameras.iter().enumerate() {
            let (rgb, op) = render_field(&field, cam)?;
            frames[v].push(Frame {
                rgb: rgb.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
                mask: op.iter().map(|&o| if o > 0.5 { 255 } else { 0 }).collect(),
            });
        }
    }
    let density = canonical_density(rig, &skel, &poses[rig.canonical_index])?;
    let ds = Dataset {
        cameras,
        meta: Meta {
            timestamps: ts,
            canonical_index: rig.canonical_index,
            holdout_views: (views..views + rig.cameras.holdout).collect(),
        },
        frames,
        ground_truth: Some(GroundTruth {
            skeleton: skel,
            poses,
            density,
        }),
    };
    ds.validate()?;
    Ok(ds)
}

/// Analytic density rasterized over `[-1, 1]³`.
pub fn canonical_density(rig: &SyntheticRig, skel: &Skeleton, pose: &Pose) -> Result<DensityGrid> {
    let field = RigField::new(rig, skel, pose)?;
    rasterize_field(|p| field.density(p), [rig.grid_resolution; 3], Aabb::cube(1.0))
}

// ------------------------------------------------------------ checkpoint

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"APCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to render, resume training or serve.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ArticulatedModel,
    pub optimizer: Option<OptimizerState>,
    /// iterations completed
    pub iteration: usize,
    pub config: serde_json::Value,
    /// cameras and timing of the dataset the model was built from
    pub cameras: Vec<Camera>,
    pub meta: Meta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// in f64 elements from the payload start
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    skeleton: Skeleton,
    medial: Vec<Vec3<f64>>,
    simplified: bool,
    alpha: f64,
    alpha_frozen: bool,
    bones: usize,
    time_bands: usize,
    render: RenderConfig,
    radius: f64,
    iteration: usize,
    config: serde_json::Value,
    optimizer_step: Option<u64>,
    #[serde(default)]
    cameras: Vec<Camera>,
    #[serde(default)]
    meta: Meta,
    tensors: Vec<TensorEntry>,
}

fn mlp_tensors(prefix: &str, mlp: &Mlp<f64>, out: &mut Vec<(String, Tensor<f64>)>) {
    for (i, l) in mlp.layers.iter().enumerate() {
        out.push((format!("{prefix}.{i}.weight"), l.weight.clone()));
        out.push((format!("{prefix}.{i}.bias"), l.bias.clone()));
    }
}

fn take_mlp(prefix: &str, map: &mut BTreeMap<String, Tensor<f64>>, path: &Path) -> Result<Mlp<f64>> {
    let mut layers = Vec::new();
    while let Some(weight) = map.remove(&format!("{prefix}.{}.weight", layers.len())) {
        let bias = map
            .remove(&format!("{prefix}.{}.bias", layers.len()))
            .ok_or_else(|| Error::format(path, format!("{prefix} layer {} has no bias", layers.len())))?;
        layers.push(Linear { weight, bias });
    }
    if layers.is_empty() {
        return Err(Error::format(path, format!("missing network {prefix}")));
    }
    Ok(Mlp { layers })
}

pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let m = &ck.model;
    let mut tensors: Vec<(String, Tensor<f64>)> = vec![
        ("points".into(), Tensor::new(&[m.points.len(), 3], m.points.concat())?),
        ("features".into(), m.features.clone()),
        ("raw_weights".into(), m.weights.raw.clone()),
    ];
    mlp_tensors("regressor", &m.regressor.mlp, &mut tensors);
    mlp_tensors("embed", &m.render.embed, &mut tensors);
    mlp_tensors("density", &m.render.density, &mut tensors);
    mlp_tensors("color", &m.render.color, &mut tensors);
    if let Some(opt) = &ck.optimizer {
        for (k, (mm, vv)) in opt.m.iter().zip(&opt.v).enumerate() {
            tensors.push((format!("adam.m.{k}"), Tensor::from_vec(mm.clone())));
            tensors.push((format!("adam.v.{k}"), Tensor::from_vec(vv.clone())));
        }
    }
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = Header {
        skeleton: m.skeleton.clone(),
        medial: m.medial.clone(),
        simplified: m.simplified,
        alpha: m.weights.alpha,
        alpha_frozen: m.weights.alpha_frozen,
        bones: m.regressor.bones,
        time_bands: m.regressor.bands,
        render: m.render.config.clone(),
        radius: m.render.radius,
        iteration: ck.iteration,
        config: ck.config.clone(),
        optimizer_step: ck.optimizer.as_ref().map(|o| o.step),
        cameras: ck.cameras.clone(),
        meta: ck.meta.clone(),
        tensors: entries,
    };
    let hj = serde_json::to_vec(&header).map_err(|e| Error::InvalidArgument(format!("checkpoint header: {e}")))?;
    let mut b = Vec::with_capacity(16 + hj.len() + 8 * offset + 32);
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    b.extend_from_slice(&(hj.len() as u64).to_le_bytes());
    b.extend_from_slice(&hj);
    for (_, t) in &tensors {
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    Ok(b)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(ck)?;
    // write then rename so readers never see a partial file
    let tmp = path.with_extension("apck.tmp");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let b = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&b, path)
}

pub fn parse_checkpoint(b: &[u8], path: &Path) -> Result<Checkpoint> {
    if b.len() < 4 || &b[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not an .apck checkpoint"));
    }
    if b.len() < 16 + 32 {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let (body, digest) = b.split_at(b.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version > CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let hend = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::format(path, "header length past end of file"))?;
    let header: Header = serde_json::from_slice(&body[16..hend]).map_err(|e| Error::format(path, e))?;
    let payload = &body[hend..];
    let mut map = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let (s, t) = (8 * e.offset, 8 * (e.offset + n));
        if t > payload.len() {
            return Err(Error::format(path, format!("tensor {} runs past the payload", e.name)));
        }
        let data = payload[s..t]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        map.insert(e.name.clone(), Tensor::new(&e.shape, data).map_err(|x| Error::format(path, x))?);
    }
    let mut take = |name: &str| map.remove(name).ok_or_else(|| Error::format(path, format!("missing tensor {name}")));
    let points_t = take("points")?;
    let features = take("features")?;
    let raw = take("raw_weights")?;
    let points = points_t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let regressor = PoseRegressor {
        mlp: take_mlp("regressor", &mut map, path)?,
        bones: header.bones,
        bands: header.time_bands,
    };
    let render = RenderModel {
        config: header.render,
        radius: header.radius,
        embed: take_mlp("embed", &mut map, path)?,
        density: take_mlp("density", &mut map, path)?,
        color: take_mlp("color", &mut map, path)?,
    };
    let optimizer = match header.optimizer_step {
        Some(step) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            while let Some(t) = map.remove(&format!("adam.m.{}", m.len())) {
                let vv = map
                    .remove(&format!("adam.v.{}", m.len()))
                    .ok_or_else(|| Error::format(path, "optimizer moments incomplete"))?;
                m.push(t.into_data());
                v.push(vv.into_data());
            }
            Some(OptimizerState { step, m, v })
        }
        None => None,
    };
    let model = ArticulatedModel {
        skeleton: header.skeleton,
        points,
        features,
        weights: SkinningWeights {
            raw,
            alpha: header.alpha,
            alpha_frozen: header.alpha_frozen,
        },
        regressor,
        render,
        medial: header.medial,
        simplified: header.simplified,
    };
    model.validate().map_err(|e| Error::format(path, e))?;
    Ok(Checkpoint {
        model,
        optimizer,
        iteration: header.iteration,
        config: header.config,
        cameras: header.cameras,
        meta: header.meta,
    })
}

/// Paths of the frame and mask for one view and timestamp.
pub fn frame_paths(dir: &Path, view_id: usize, t: usize) -> (PathBuf, PathBuf) {
    let n = frame_name(view_id, t);
    (dir.join("frames").join(&n), dir.join("masks").join(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_rig() -> SyntheticRig {
        let mut r = SyntheticRig::two_joint_arm();
        r.grid_resolution = 16;
        r.march_samples = 32;
        r
    }

    #[test]
    fn density_grid_matches_field() {
        let rig = small_rig();
        let ds = generate_synthetic(&rig, 2, 3, 8, 8).unwrap();
        let gt = ds.ground_truth.as_ref().unwrap();
        let field = RigField::new(&rig, &gt.skeleton, &gt.poses[0]).unwrap();
        let g = &gt.density;
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let v = g.values[g.index(x, y, z)];
                    assert!((v - field.density(g.center(x, y, z))).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn static_rig_frames_repeat() {
        let mut rig = small_rig();
        for m in &mut rig.motions {
            m.amplitude_deg = 0.0;
        }
        let ds = generate_synthetic(&rig, 2, 3, 12, 10).unwrap();
        for row in &ds.frames {
            assert!(row.iter().all(|f| f == &row[0]));
        }
    }

    #[test]
    fn degenerate_part_rejected() {
        let mut rig = small_rig();
        rig.parts[0].shape = Shape::Capsule {
            a: [0.0; 3],
            b: [1.0, 0.0, 0.0],
            radius: 0.0,
        };
        assert!(generate_synthetic(&rig, 1, 1, 4, 4).is_err());
    }

    #[test]
    fn box_sdf() {
        let s = Shape::Box {
            center: [0.0; 3],
            half: [1.0, 2.0, 3.0],
        };
        assert_eq!(s.sdf([0.0; 3]), -1.0);
        assert_eq!(s.sdf([4.0, 0.0, 0.0]), 3.0);
    }

    #[test]
    fn density_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = rasterize_field(|p| 4.0 + p[0] + 2.0 * p[1] - p[2], [3, 4, 5], Aabb::cube(1.0)).unwrap();
        let p = dir.path().join("d.bin");
        save_density(&g, &p).unwrap();
        assert_eq!(load_density(&p).unwrap(), g);
        fs::write(&p, b"nope").unwrap();
        assert!(load_density(&p).is_err());
    }

    #[test]
    fn rig_json_round_trip() {
        let rig = SyntheticRig::two_joint_arm();
        let s = serde_json::to_string(&rig).unwrap();
        assert_eq!(serde_json::from_str::<SyntheticRig>(&s).unwrap(), rig);
    }
}
