//! The articulated point model: canonical cloud, skeleton, skinning,
//! pose regressor and render heads, plus the shared forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::kinematics::{
    column_transforms_var, forward_kinematics, lbs_warp, lbs_warp_var, normalize_weights_var, Pose, PoseRegressor,
    SkinningWeights, Warp, DEFAULT_TIME_BANDS,
};
use crate::losses::{knn_pairs, DEFAULT_REG_NEIGHBORS};
use crate::nn::MlpVars;
use crate::render::{all_pixels, generate_rays, BoundRender, Camera, Ray, RayOutput, RenderConfig, RenderModel, Sampling};
use crate::skeleton::{detect_static_joints, simplify, skeleton_from_volume, Skeleton, StaticityReport, DEFAULT_BONE_LENGTH};
use crate::voxel_seed::{binarize_and_clean, extract_points, DensityGrid, DEFAULT_DENSITY_THRESHOLD};

/// Rays per chunk when rendering whole images.
pub const IMAGE_CHUNK: usize = 1024;

/// Settings for building a model from a density grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub target_points: usize,
    pub density_threshold: f64,
    pub feature_dim: usize,
    pub bone_length: usize,
    pub time_bands: usize,
    /// query radius in voxel spacings, used when the render config has none
    pub radius_voxels: f64,
    pub render: RenderConfig,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            target_points: 2000,
            density_threshold: DEFAULT_DENSITY_THRESHOLD,
            feature_dim: 16,
            bone_length: DEFAULT_BONE_LENGTH,
            time_bands: DEFAULT_TIME_BANDS,
            radius_voxels: 1.5,
            render: RenderConfig::default(),
        }
    }
}

/// Parameter groups, each with its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Features,
    Weights,
    Alpha,
    Joints,
    Regressor,
    Heads,
}

pub const GROUPS: [Group; 6] = [
    Group::Features,
    Group::Weights,
    Group::Alpha,
    Group::Joints,
    Group::Regressor,
    Group::Heads,
];

#[derive(Clone, Debug, PartialEq)]
pub struct ArticulatedModel {
    pub skeleton: Skeleton,
    /// canonical positions
    pub points: Vec<Vec3<f64>>,
    /// `[N, F]`
    pub features: Tensor<f64>,
    pub weights: SkinningWeights,
    pub regressor: PoseRegressor,
    pub render: RenderModel,
    /// medial-axis points the joints are kept close to
    pub medial: Vec<Vec3<f64>>,
    pub simplified: bool,
}

/// Model parameters bound to one tape.
pub struct Bound<'t> {
    pub features: Var<'t, f64>,
    pub raw_weights: Var<'t, f64>,
    pub alpha: Var<'t, f64>,
    pub joints: Var<'t, f64>,
    pub regressor: MlpVars<'t, f64>,
    pub render: BoundRender<'t>,
}

impl<'t> Bound<'t> {
    /// Vars in [`ArticulatedModel::params_mut`] order.
    pub fn vars(&self) -> Vec<(Group, Var<'t, f64>)> {
        let mut v = vec![
            (Group::Features, self.features),
            (Group::Weights, self.raw_weights),
            (Group::Alpha, self.alpha),
            (Group::Joints, self.joints),
        ];
        v.extend(self.regressor.vars().into_iter().map(|x| (Group::Regressor, x)));
        v.extend(self.render.embed.vars().into_iter().map(|x| (Group::Heads, x)));
        v.extend(self.render.density.vars().into_iter().map(|x| (Group::Heads, x)));
        v.extend(self.render.color.vars().into_iter().map(|x| (Group::Heads, x)));
        v
    }
}

/// Posed cloud on the tape.
pub struct Posed<'t> {
    pub points: Var<'t, f64>,
    pub blended: Var<'t, f64>,
    /// normalized skinning weights `[N, C]`
    pub weights: Var<'t, f64>,
}

/// Rendered image with per-pixel opacity, rows top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `[H·W·3]` in `[0, 1]`
    pub rgb: Vec<f64>,
    /// `[H·W]`
    pub opacity: Vec<f64>,
}

impl Image {
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

impl ArticulatedModel {
    /// Seeds points, skeleton, weights and networks from a canonical density
    /// grid.
    pub fn initialize(grid: &DensityGrid, cfg: &InitConfig, rng: &mut impl Rng) -> Result<Self> {
        let ex = extract_points(grid, cfg.density_threshold, cfg.target_points, cfg.feature_dim, rng)?;
        let clean = binarize_and_clean(&ex.grid, cfg.density_threshold)?;
        let joints = skeleton_from_volume(&clean, cfg.bone_length)?;
        let skeleton = joints.skeleton;
        let points = ex.cloud.points;
        let spacing = ex.grid.voxel_size();
        let radius = cfg
            .render
            .radius
            .unwrap_or(cfg.radius_voxels * spacing.iter().cloned().fold(0.0, f64::max));
        let weights = SkinningWeights::init(&points, &skeleton);
        let regressor = PoseRegressor::new(skeleton.num_bones(), cfg.time_bands, rng);
        let render = RenderModel::new(cfg.render.clone(), cfg.feature_dim, radius, rng)?;
        log::info!(
            "initialized {} points at resolution {}, {} joints, radius {radius:.4}",
            points.len(),
            ex.resolution,
            skeleton.num_joints()
        );
        Ok(Self {
            skeleton,
            points,
            features: ex.cloud.features,
            weights,
            regressor,
            render,
            medial: joints.medial_points,
            simplified: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        let c = self.skeleton.weight_columns();
        if self.features.shape() != [n, self.features.last_dim()] || self.features.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "features {:?} do not match {n} points",
                self.features.shape()
            )));
        }
        if self.weights.raw.shape() != [n, c] {
            return Err(Error::InvalidArgument(format!(
                "skinning weights {:?} do not match {n} points × {c} columns",
                self.weights.raw.shape()
            )));
        }
        if self.regressor.bones != self.skeleton.num_bones() {
            return Err(Error::PoseArity {
                expected: self.skeleton.num_bones(),
                got: self.regressor.bones,
            });
        }
        Ok(())
    }

    pub fn num_bones(&self) -> usize {
        self.skeleton.num_bones()
    }

    /// Directed k-nearest canonical pairs for the rigidity and smoothness
    /// terms.
    pub fn regularizer_pairs(&self) -> Vec<(usize, usize)> {
        knn_pairs(&self.points, DEFAULT_REG_NEIGHBORS)
    }

    /// Mutable parameter storage in [`Bound::vars`] order.
    pub fn params_mut(&mut self) -> Vec<(Group, &mut [f64])> {
        let mut v: Vec<(Group, &mut [f64])> = vec![
            (Group::Features, self.features.data_mut()),
            (Group::Weights, self.weights.raw.data_mut()),
            (Group::Alpha, std::slice::from_mut(&mut self.weights.alpha)),
            (Group::Joints, self.skeleton.joints_mut().as_flattened_mut()),
        ];
        v.extend(self.regressor.mlp.tensors_mut().into_iter().map(|t| (Group::Regressor, t.data_mut())));
        v.extend(self.render.embed.tensors_mut().into_iter().map(|t| (Group::Heads, t.data_mut())));
        v.extend(self.render.density.tensors_mut().into_iter().map(|t| (Group::Heads, t.data_mut())));
        v.extend(self.render.color.tensors_mut().into_iter().map(|t| (Group::Heads, t.data_mut())));
        v
    }

    /// Parameter shapes in [`Self::params_mut`] order.
    pub fn param_sizes(&mut self) -> Vec<usize> {
        self.params_mut().iter().map(|(_, s)| s.len()).collect()
    }

    /// Binds all parameters. The temperature stays constant once frozen.
    pub fn bind<'t>(&self, tape: &'t Tape<f64>, trainable: bool) -> Bound<'t> {
        let p = |t: &Tensor<f64>| if trainable { tape.param(t) } else { tape.constant(t.clone()) };
        let alpha = Tensor::from_vec(vec![self.weights.alpha]);
        let joints = Tensor::new(&[self.skeleton.num_joints(), 3], self.skeleton.joints().concat()).expect("J×3");
        Bound {
            features: p(&self.features),
            raw_weights: p(&self.weights.raw),
            alpha: if self.weights.alpha_frozen { tape.constant(alpha) } else { p(&alpha) },
            joints: p(&joints),
            regressor: self.regressor.mlp.bind(tape, trainable),
            render: self.render.bind(tape, trainable),
        }
    }

    /// Flat pose at normalized time `t` from the regressor.
    pub fn pose_var<'t>(&self, bound: &Bound<'t>, t: f64) -> Result<Var<'t, f64>> {
        self.regressor.forward_var(&bound.regressor, bound.features.tape(), t)
    }

    /// Constant flat pose.
    pub fn pose_const<'t>(&self, tape: &'t Tape<f64>, pose: &Pose) -> Result<Var<'t, f64>> {
        pose.check_arity(self.num_bones())?;
        Ok(tape.constant(Tensor::from_vec(pose.to_flat())))
    }

    /// Forward kinematics and blend skinning of the canonical cloud.
    pub fn pose_cloud<'t>(&self, bound: &Bound<'t>, pose: Var<'t, f64>) -> Result<Posed<'t>> {
        let tape = bound.features.tape();
        let cols = column_transforms_var(&self.skeleton, bound.joints, pose)?;
        let w = normalize_weights_var(bound.raw_weights, bound.alpha)?;
        let pts = tape.constant(Tensor::new(&[self.points.len(), 3], self.points.concat())?);
        let (points, blended) = lbs_warp_var(pts, w, cols)?;
        Ok(Posed {
            points,
            blended,
            weights: w,
        })
    }

    pub fn render_rays<'t, R: Rng>(
        &self,
        bound: &Bound<'t>,
        posed: &Posed<'t>,
        rays: &[Ray],
        sampling: &mut Sampling<'_, R>,
    ) -> Result<RayOutput<'t>> {
        self.render
            .render_rays(&bound.render, posed.points, posed.blended, bound.features, rays, sampling)
    }

    /// Plain-value warp for a pose.
    pub fn warp(&self, pose: &Pose) -> Result<Warp> {
        let fk = forward_kinematics(&self.skeleton, pose)?;
        lbs_warp(&self.points, &self.weights.normalized()?, &fk.columns())
    }

    pub fn pose_at(&self, t: f64) -> Result<Pose> {
        self.regressor.eval(t)
    }

    /// Prunes and merges bones that stay under `threshold_deg` of local
    /// rotation in the regressed poses at `timestamps`. The merged weights
    /// are stored in normalized form with the temperature frozen.
    pub fn simplified(&self, timestamps: &[f64], threshold_deg: f64) -> Result<(ArticulatedModel, StaticityReport)> {
        let poses = timestamps.iter().map(|&t| self.pose_at(t)).collect::<Result<Vec<_>>>()?;
        let report = detect_static_joints(&self.skeleton, &poses, threshold_deg)?;
        let s = simplify(&self.skeleton, &self.weights.normalized()?, &report)?;
        let mut out = self.clone();
        out.regressor = self.regressor.remap(&s.pose_source);
        out.weights = SkinningWeights::from_normalized(&s.weights);
        out.skeleton = s.skeleton;
        out.simplified = true;
        out.validate()?;
        Ok((out, report))
    }

    /// Full image for `pose` with bin-midpoint sampling.
    pub fn render_image(&self, camera: &Camera, pose: &Pose) -> Result<Image> {
        camera.validate()?;
        let rays = generate_rays(camera, &all_pixels(camera))?;
        let mut rgb = Vec::with_capacity(rays.len() * 3);
        let mut opacity = Vec::with_capacity(rays.len());
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let posed = self.pose_cloud(&bound, self.pose_const(&tape, pose)?)?;
        // everything above the mark is reused across chunks
        let mark = tape.len();
        for chunk in rays.chunks(IMAGE_CHUNK) {
            let out = self.render_rays::<rand_chacha::ChaCha8Rng>(&bound, &posed, chunk, &mut Sampling::Midpoint)?;
            rgb.extend_from_slice(out.rgb.value().data());
            opacity.extend_from_slice(out.opacity.value().data());
            tape.truncate(mark);
        }
        if rgb.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rendered image".into()));
        }
        Ok(Image {
            width: camera.width,
            height: camera.height,
            rgb,
            opacity,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel_seed::{rasterize_field, Aabb};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn box_model() -> ArticulatedModel {
        box_model_with(1500, 1.5)
    }

    fn box_model_with(target_points: usize, radius_voxels: f64) -> ArticulatedModel {
        let grid = rasterize_field(
            |p| if p[0].abs() < 0.6 && p[1].abs() < 0.4 && p[2].abs() < 0.4 { 1.0 } else { 0.0 },
            [64; 3],
            Aabb::cube(1.0),
        )
        .unwrap();
        let cfg = InitConfig {
            target_points,
            feature_dim: 8,
            radius_voxels,
            ..InitConfig::default()
        };
        ArticulatedModel::initialize(&grid, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn params_and_vars_line_up() {
        let mut m = box_model();
        m.validate().unwrap();
        let tape = Tape::new();
        let b = m.bind(&tape, true);
        let vars: Vec<usize> = b.vars().iter().map(|(_, v)| v.value().numel()).collect();
        let groups: Vec<Group> = b.vars().iter().map(|(g, _)| *g).collect();
        assert_eq!(vars, m.param_sizes());
        assert_eq!(groups, m.params_mut().iter().map(|(g, _)| *g).collect::<Vec<_>>());
    }

    #[test]
    fn opaque_box_silhouette() {
        // just above the half voxel diagonal so the interior stays covered
        let m = box_model_with(30000, 0.9);
        let cam = Camera::look_at(0, [0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 64, 64, 40.0);
        let img = m.render_image(&cam, &Pose::identity(m.num_bones())).unwrap();
        let (mut inter, mut union) = (0usize, 0usize);
        let rays = generate_rays(&cam, &all_pixels(&cam)).unwrap();
        for (k, r) in rays.iter().enumerate() {
            // analytic silhouette of the box seen along the ray
            let hit = r.clip([-0.6, -0.4, -0.4], [0.6, 0.4, 0.4]).is_some();
            let op = img.opacity[k] > 0.5;
            inter += (hit && op) as usize;
            union += (hit || op) as usize;
        }
        let iou = inter as f64 / union as f64;
        assert!(iou > 0.9, "IoU {iou}");
    }

    #[test]
    fn rest_pose_warp_is_identity() {
        let m = box_model();
        let w = m.warp(&Pose::identity(m.num_bones())).unwrap();
        assert_eq!(w.points, m.points);
    }
}
