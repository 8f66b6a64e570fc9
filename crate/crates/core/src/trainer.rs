//! Joint optimization of the cloud, skinning, skeleton, pose regressor and
//! render heads.

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::kinematics::Pose;
use crate::skeleton::Skeleton;
use crate::losses::{
    arap_loss_var, mask_loss_var, photometric_var, skel_loss_var, smooth_loss_var, sparse_loss_var, total_loss,
    tranf_loss_var, LossReport, LossWeights, RawTerms, Reduction, DEFAULT_MASK_SUBSAMPLE,
};
use crate::model::{ArticulatedModel, Group};
use crate::render::{generate_rays, Sampling};
use crate::scene_io::{save_checkpoint, Checkpoint, Dataset};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;
/// Silhouette weight for 64-pixel images; the chamfer is in squared
/// pixels, so small images need a larger weight than high-resolution ones.
pub const DESK_MASK_WEIGHT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupRates {
    pub features: f64,
    pub weights: f64,
    pub alpha: f64,
    pub joints: f64,
    pub regressor: f64,
    pub heads: f64,
}

/// Desk-scale rates: the heads and features move faster than in
/// [`GroupRates::reference`] so a few thousand small batches suffice.
impl Default for GroupRates {
    fn default() -> Self {
        Self {
            features: 3e-3,
            heads: 3e-3,
            ..Self::reference()
        }
    }
}

impl GroupRates {
    /// Rates for long runs with large batches.
    pub fn reference() -> Self {
        Self {
            features: 1e-4,
            weights: 1e-4,
            alpha: 1e-5,
            joints: 1e-5,
            regressor: 1e-3,
            heads: 1e-4,
        }
    }

    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Features => self.features,
            Group::Weights => self.weights,
            Group::Alpha => self.alpha,
            Group::Joints => self.joints,
            Group::Regressor => self.regressor,
            Group::Heads => self.heads,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            features: self.features * s,
            weights: self.weights * s,
            alpha: self.alpha * s,
            joints: self.joints * s,
            regressor: self.regressor * s,
            heads: self.heads * s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub rates: GroupRates,
    pub decay_factor: f64,
    /// fraction of the run after which rates are multiplied by the decay
    pub decay_at: f64,
    /// fraction of the run over which the accessible timestamps grow
    pub schedule_fraction: f64,
    pub seed: u64,
    /// held-out PSNR every this many iterations, 0 = never
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    pub log_interval: usize,
    pub loss_weights: LossWeights,
    pub reduction: Reduction,
    pub mask_subsample: usize,
    /// keep every timestamp at the rest pose
    pub freeze_pose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            rays_per_batch: 512,
            rates: GroupRates::default(),
            decay_factor: 0.1,
            decay_at: 0.5,
            schedule_fraction: 0.5,
            seed: 0,
            eval_interval: 0,
            checkpoint_interval: 0,
            log_interval: 50,
            loss_weights: LossWeights {
                mask: DESK_MASK_WEIGHT,
                ..LossWeights::default()
            },
            reduction: Reduction::Mean,
            mask_subsample: DEFAULT_MASK_SUBSAMPLE,
            freeze_pose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be positive".into()));
        }
        if self.rays_per_batch < 64 {
            return Err(Error::InvalidArgument(format!(
                "rays per batch must be at least 64, got {}",
                self.rays_per_batch
            )));
        }
        if !(0.0..1.0).contains(&self.decay_at) {
            return Err(Error::InvalidArgument(format!(
                "decay point {} must fall before the end of training",
                self.decay_at
            )));
        }
        if !(self.schedule_fraction > 0.0 && self.schedule_fraction <= 1.0) {
            return Err(Error::InvalidArgument("schedule fraction must be in (0, 1]".into()));
        }
        if self.mask_subsample == 0 {
            return Err(Error::InvalidArgument("mask subsample cap must be positive".into()));
        }
        Ok(())
    }

    pub fn rate(&self, g: Group, iteration: usize) -> f64 {
        let base = self.rates.get(g);
        if iteration as f64 >= self.decay_at * self.iterations as f64 {
            base * self.decay_factor
        } else {
            base
        }
    }
}

/// Adam moments per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn matches(&self, sizes: &[usize]) -> bool {
        self.m.len() == sizes.len()
            && self.v.len() == sizes.len()
            && self.m.iter().zip(&self.v).zip(sizes).all(|((m, v), &n)| m.len() == n && v.len() == n)
    }
}

/// Bias-corrected Adam update at step `t` (1-based).
pub fn adam_step(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) {
    let b1t = 1.0 - ADAM_BETA1.powi(t as i32);
    let b2t = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = m[i] / b1t;
        let vh = v[i] / b2t;
        param[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

/// Timestamps visible at `iteration`, nearest to the canonical one first.
/// Their count grows linearly from 1 to all over `fraction` of the run.
pub fn timestamp_schedule(iteration: usize, iterations: usize, timestamps: usize, canonical: usize, fraction: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..timestamps).collect();
    order.sort_by_key(|&k| (k.abs_diff(canonical), k));
    let span = fraction * iterations as f64;
    let progress = if span <= 0.0 { 1.0 } else { (iteration as f64 / span).min(1.0) };
    let count = 1 + ((timestamps - 1) as f64 * progress).floor() as usize;
    order.truncate(count.min(timestamps));
    order
}

pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPsnr {
    pub view: usize,
    pub camera_id: usize,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_view: Vec<ViewPsnr>,
    pub mean: f64,
}

/// PSNR of renders at the regressed poses against the frames of `views`,
/// pooled over timestamps per view.
pub fn evaluate(model: &ArticulatedModel, ds: &Dataset, views: &[usize]) -> Result<EvalReport> {
    let poses: Vec<Pose> = ds
        .meta
        .timestamps
        .iter()
        .map(|&t| model.pose_at(t))
        .collect::<Result<_>>()?;
    evaluate_poses(model, ds, views, &poses)
}

/// As [`evaluate`] with explicit per-timestamp poses.
pub fn evaluate_poses(model: &ArticulatedModel, ds: &Dataset, views: &[usize], poses: &[Pose]) -> Result<EvalReport> {
    let mut per_view = Vec::with_capacity(views.len());
    for &v in views {
        let cam = ds
            .cameras
            .get(v)
            .ok_or_else(|| Error::Dataset(format!("no view {v}")))?;
        let mut se = 0.0;
        let mut n = 0usize;
        for (k, pose) in poses.iter().enumerate() {
            let img = model.render_image(cam, pose)?;
            let f = &ds.frames[v][k];
            for (a, &b) in img.rgb.iter().zip(&f.rgb) {
                se += (a - b as f64 / 255.0).powi(2);
            }
            n += img.rgb.len();
        }
        per_view.push(ViewPsnr {
            view: v,
            camera_id: cam.id,
            psnr: psnr(se / n.max(1) as f64),
        });
    }
    let mean = per_view.iter().map(|p| p.psnr).sum::<f64>() / per_view.len().max(1) as f64;
    Ok(EvalReport { per_view, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub losses: LossReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    /// seconds since the run started
    pub wallclock: f64,
}

/// Mutable training state for one run.
pub struct Trainer<'d> {
    pub model: ArticulatedModel,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub iteration: usize,
    dataset: &'d Dataset,
    pairs: Vec<(usize, usize)>,
    train_views: Vec<usize>,
}

impl<'d> Trainer<'d> {
    pub fn new(mut model: ArticulatedModel, dataset: &'d Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        model.validate()?;
        if config.freeze_pose {
            let last = model.regressor.mlp.last_mut();
            last.weight = last.weight.map(|_| 0.0);
            last.bias = last.bias.map(|_| 0.0);
        }
        let sizes = model.param_sizes();
        let pairs = model.regularizer_pairs();
        Ok(Self {
            optimizer: OptimizerState::new(&sizes),
            model,
            config,
            iteration: 0,
            train_views: dataset.train_views(),
            dataset,
            pairs,
        })
    }

    /// Continues from a checkpoint's optimizer state and iteration count.
    pub fn resume(model: ArticulatedModel, dataset: &'d Dataset, config: TrainConfig, optimizer: OptimizerState, iteration: usize) -> Result<Self> {
        let mut t = Self::new(model, dataset, config)?;
        if !optimizer.matches(&t.model.param_sizes()) {
            return Err(Error::InvalidArgument("optimizer state does not match the model parameters".into()));
        }
        t.optimizer = optimizer;
        t.iteration = iteration;
        Ok(t)
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.iteration as u64);
        rng
    }

    /// One forward/backward/update cycle on a single timestamp.
    pub fn step(&mut self) -> Result<LossReport> {
        let cfg = &self.config;
        let ds = self.dataset;
        let model = &self.model;
        let mut rng = self.step_rng();
        let visible = timestamp_schedule(
            self.iteration,
            cfg.iterations,
            ds.num_timestamps(),
            ds.meta.canonical_index,
            cfg.schedule_fraction,
        );
        let ti = visible[rng.random_range(0..visible.len())];
        let t = ds.meta.timestamps[ti];

        let mut rays = Vec::with_capacity(cfg.rays_per_batch);
        let mut target = Vec::with_capacity(3 * cfg.rays_per_batch);
        for _ in 0..cfg.rays_per_batch {
            let v = self.train_views[rng.random_range(0..self.train_views.len())];
            let cam = &ds.cameras[v];
            let px = rng.random_range(0..cam.width * cam.height);
            rays.extend(generate_rays(cam, &[(px % cam.width, px / cam.width)])?);
            target.extend_from_slice(&ds.frames[v][ti].color(px));
        }
        let target = Tensor::new(&[rays.len(), 3], target)?;

        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let pose = if cfg.freeze_pose {
            model.pose_const(&tape, &Pose::identity(model.num_bones()))?
        } else {
            model.pose_var(&bound, t)?
        };
        let posed = model.pose_cloud(&bound, pose)?;
        let out = model.render_rays(&bound, &posed, &rays, &mut Sampling::Jittered(&mut rng))?;
        let mv = self.train_views[rng.random_range(0..self.train_views.len())];
        let terms: RawTerms = [
            Some(photometric_var(out.rgb, &target)?),
            mask_loss_var(posed.points, &ds.cameras[mv], &ds.frames[mv][ti].mask, cfg.mask_subsample, &mut rng)?,
            Some(skel_loss_var(&model.medial, bound.joints)?),
            Some(tranf_loss_var(pose, model.num_bones())?),
            Some(smooth_loss_var(posed.weights, &self.pairs, cfg.reduction)?),
            Some(sparse_loss_var(posed.weights, cfg.reduction)),
            Some(arap_loss_var(&model.points, posed.points, &self.pairs, cfg.reduction)?),
        ];
        let (loss, report) = total_loss(&tape, &terms, &cfg.loss_weights)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {}", self.iteration)));
        }
        let mut grads = tape.backward(loss)?;
        let vars = bound.vars();
        let grads: Vec<Option<Tensor<f64>>> = vars.iter().map(|(_, v)| grads.take(*v)).collect();
        drop(vars);
        drop(bound);
        drop(tape);

        let iteration = self.iteration;
        let cfg = self.config.clone();
        self.optimizer.step += 1;
        let step = self.optimizer.step;
        let params = self.model.params_mut();
        let mut skip = std::collections::HashSet::new();
        for ((g, _), gr) in params.iter().zip(&grads) {
            if gr.as_ref().is_some_and(|t| !t.all_finite()) {
                skip.insert(*g);
            }
        }
        for g in &skip {
            log::warn!("non-finite gradient in {g:?} at iteration {iteration}; group update skipped");
        }
        for (k, ((g, p), gr)) in params.into_iter().zip(&grads).enumerate() {
            let Some(gr) = gr else { continue };
            if skip.contains(&g) || (cfg.freeze_pose && g == Group::Regressor) {
                continue;
            }
            let lr = cfg.rate(g, iteration);
            adam_step(p, gr.data(), &mut self.optimizer.m[k], &mut self.optimizer.v[k], step, lr);
        }
        if self.model.weights.alpha <= 1e-6 {
            self.model.weights.alpha = 1e-6;
        }
        self.iteration += 1;
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            iteration: self.iteration,
            config: serde_json::to_value(&self.config).unwrap_or(serde_json::Value::Null),
            cameras: self.dataset.cameras.clone(),
            meta: self.dataset.meta.clone(),
        }
    }
}

/// Where [`fit`] writes its side outputs.
#[derive(Clone, Debug, Default)]
pub struct FitOutputs {
    /// JSON-lines metric history, appended to
    pub history: Option<PathBuf>,
    /// overwritten at every checkpoint interval and at the end
    pub checkpoint: Option<PathBuf>,
    /// dataset views for periodic PSNR; empty uses the held-out views
    pub eval_views: Vec<usize>,
}

pub struct FitResult {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRecord>,
}

/// Runs the remaining iterations of `trainer`.
pub fn fit(mut trainer: Trainer<'_>, outputs: &FitOutputs) -> Result<FitResult> {
    let start = Instant::now();
    let mut history = Vec::new();
    let mut sink = match &outputs.history {
        Some(p) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        ),
        None => None,
    };
    let eval_views = if outputs.eval_views.is_empty() {
        trainer.dataset.eval_views()
    } else {
        outputs.eval_views.clone()
    };
    let total = trainer.config.iterations;
    while trainer.iteration < total {
        let it = trainer.iteration;
        let report = trainer.step()?;
        let cfg = &trainer.config;
        let done = trainer.iteration;
        let eval_now = cfg.eval_interval > 0 && (done % cfg.eval_interval == 0 || done == total);
        let log_now = cfg.log_interval > 0 && (it % cfg.log_interval == 0 || done == total);
        if eval_now || log_now {
            let psnr = if eval_now {
                Some(evaluate(&trainer.model, trainer.dataset, &eval_views)?.mean)
            } else {
                None
            };
            let rec = HistoryRecord {
                iteration: it,
                losses: report,
                psnr,
                wallclock: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "iter {it}: total {:.5} photo {:.5} mask {:.3}{}",
                rec.losses.total,
                rec.losses.photo.raw,
                rec.losses.mask.raw,
                rec.psnr.map(|p| format!(" psnr {p:.2}")).unwrap_or_default()
            );
            if let Some(f) = sink.as_mut() {
                write_record(f, &rec, outputs.history.as_ref().expect("sink has a path"))?;
            }
            history.push(rec);
        }
        if let Some(p) = &outputs.checkpoint {
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < total {
                save_checkpoint(&trainer.checkpoint(), p)?;
            }
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(p) = &outputs.checkpoint {
        save_checkpoint(&checkpoint, p)?;
    }
    Ok(FitResult { checkpoint, history })
}

fn write_record(f: &mut File, rec: &HistoryRecord, path: &PathBuf) -> Result<()> {
    let line = serde_json::to_string(rec).map_err(|e| Error::format(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Signed angle from `a` to `b` about `axis`, both projected onto the
/// plane normal to it.
pub fn signed_angle(a: Vec3<f64>, b: Vec3<f64>, axis: Vec3<f64>) -> f64 {
    let n = geometry::normalize(axis);
    let pa = geometry::sub(a, geometry::scale(n, geometry::dot(a, n)));
    let pb = geometry::sub(b, geometry::scale(n, geometry::dot(b, n)));
    geometry::dot(n, geometry::cross(pa, pb)).atan2(geometry::dot(pa, pb))
}

fn wrap_deg(d: f64) -> f64 {
    let mut d = d % 360.0;
    if d > 180.0 {
        d -= 360.0;
    } else if d < -180.0 {
        d += 360.0;
    }
    d
}

/// Absolute differences in degrees between recovered and reference local
/// bone angles, one per moving reference bone and timestamp.
///
/// Points at 20% and 80% along each reference bone are carried by the
/// blended transform of their nearest canonical cloud point; the bone's
/// global angle is the signed rotation of that chord about the reference
/// axis, and the local angle subtracts the parent bone's.
pub fn bone_angle_errors(model: &ArticulatedModel, reference: &Skeleton, poses: &[Pose], timestamps: &[f64]) -> Result<Vec<f64>> {
    if poses.len() != timestamps.len() {
        return Err(Error::InvalidArgument("one reference pose per timestamp required".into()));
    }
    let bones = reference.bones();
    let anchors: Vec<[usize; 2]> = bones
        .iter()
        .map(|&(p, c)| {
            let (a, b) = (reference.joints()[p], reference.joints()[c]);
            let at = |f: f64| geometry::add(a, geometry::scale(geometry::sub(b, a), f));
            [nearest_point(&model.points, at(0.2)), nearest_point(&model.points, at(0.8))]
        })
        .collect();
    let chord = |k: usize, f: &dyn Fn(usize) -> Vec3<f64>| geometry::sub(f(anchors[k][1]), f(anchors[k][0]));
    let rest: Vec<Vec3<f64>> = (0..bones.len()).map(|k| chord(k, &|i| model.points[i])).collect();
    let mut errors = Vec::new();
    for (pose, &t) in poses.iter().zip(timestamps) {
        let warp = model.warp(&model.pose_at(t)?)?;
        let moved = |i: usize| warp.points[i];
        let global: Vec<Vec<f64>> = (0..bones.len())
            .map(|k| {
                let d = chord(k, &moved);
                // angle about each bone's own reference axis, evaluated for every bone
                (0..bones.len())
                    .map(|axis_of| signed_angle(rest[k], d, pose.bones[axis_of].axis))
                    .collect()
            })
            .collect();
        for (k, &(p, _)) in bones.iter().enumerate() {
            let gt = pose.bones[k].angle;
            if gt == 0.0 && poses.iter().all(|q| q.bones[k].angle == 0.0) {
                continue;
            }
            let mut est = global[k][k];
            if let Some(pb) = reference.bone_of_joint(p) {
                est -= global[pb][k];
            }
            errors.push(wrap_deg((est - gt).to_degrees()).abs());
        }
    }
    Ok(errors)
}

fn nearest_point(points: &[Vec3<f64>], q: Vec3<f64>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, p) in points.iter().enumerate() {
        let d = geometry::dist2(*p, q);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
