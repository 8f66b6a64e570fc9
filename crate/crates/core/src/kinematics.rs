//! Skinning weights, forward kinematics, linear blend skinning and the
//! time-conditioned pose regressor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{point_segment_distance, rodrigues, sub, Rigid, Vec3};
use crate::nn::{posenc, posenc_dim, posenc_values, Mlp};
use crate::skeleton::Skeleton;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_TIME_BANDS: usize = 10;
pub const REGRESSOR_WIDTH: usize = 128;
pub const REGRESSOR_LAYERS: usize = 4;
/// Output-layer scaling at initialization.
pub const REGRESSOR_OUTPUT_SCALE: f64 = 0.01;
const AXIS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonePose {
    pub axis: Vec3<f64>,
    /// radians
    pub angle: f64,
}

impl Default for BonePose {
    fn default() -> Self {
        Self {
            axis: [0.0, 0.0, 1.0],
            angle: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootMotion {
    pub axis: Vec3<f64>,
    pub angle: f64,
    pub translation: Vec3<f64>,
}

impl Default for RootMotion {
    fn default() -> Self {
        Self {
            axis: [0.0, 0.0, 1.0],
            angle: 0.0,
            translation: [0.0; 3],
        }
    }
}

/// Per-bone axis-angle rotations plus a rigid root motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub bones: Vec<BonePose>,
    pub root: RootMotion,
}

impl Pose {
    pub fn identity(bones: usize) -> Self {
        Self {
            bones: vec![BonePose::default(); bones],
            root: RootMotion::default(),
        }
    }

    pub fn check_arity(&self, bones: usize) -> Result<()> {
        if self.bones.len() != bones {
            return Err(Error::PoseArity {
                expected: bones,
                got: self.bones.len(),
            });
        }
        let finite = self
            .bones
            .iter()
            .flat_map(|b| b.axis.into_iter().chain([b.angle]))
            .chain(self.root.axis)
            .chain([self.root.angle])
            .chain(self.root.translation)
            .all(f64::is_finite);
        if !finite {
            return Err(Error::NonFinite("pose parameter".into()));
        }
        Ok(())
    }

    /// `[axis, angle]` per bone, then root `[axis, angle, translation]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(4 * self.bones.len() + 7);
        for b in &self.bones {
            v.extend_from_slice(&b.axis);
            v.push(b.angle);
        }
        v.extend_from_slice(&self.root.axis);
        v.push(self.root.angle);
        v.extend_from_slice(&self.root.translation);
        v
    }

    pub fn from_flat(bones: usize, v: &[f64]) -> Result<Self> {
        if v.len() != 4 * bones + 7 {
            return Err(Error::PoseArity {
                expected: bones,
                got: v.len().saturating_sub(7) / 4,
            });
        }
        let r = 4 * bones;
        Ok(Self {
            bones: (0..bones)
                .map(|b| BonePose {
                    axis: [v[4 * b], v[4 * b + 1], v[4 * b + 2]],
                    angle: v[4 * b + 3],
                })
                .collect(),
            root: RootMotion {
                axis: [v[r], v[r + 1], v[r + 2]],
                angle: v[r + 3],
                translation: [v[r + 4], v[r + 5], v[r + 6]],
            },
        })
    }

    /// Component-wise linear blend of two poses.
    pub fn lerp(&self, other: &Pose, s: f64) -> Result<Pose> {
        other.check_arity(self.bones.len())?;
        let a = self.to_flat();
        let b = other.to_flat();
        let v: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + (y - x) * s).collect();
        Pose::from_flat(self.bones.len(), &v)
    }
}

/// Axis and angle of `b` flipped onto the hemisphere of `a`. A zero
/// angle or axis takes the other side's axis.
fn aligned_pair(a: Vec3<f64>, ta: f64, b: Vec3<f64>, tb: f64) -> (Vec3<f64>, Vec3<f64>, f64) {
    let unit = |v: Vec3<f64>| {
        let n = crate::geometry::norm(v);
        (n > 0.0).then(|| [v[0] / n, v[1] / n, v[2] / n])
    };
    let ua = unit(a).filter(|_| ta != 0.0);
    let ub = unit(b).filter(|_| tb != 0.0);
    let (ua, ub) = match (ua, ub) {
        (Some(x), Some(y)) => (x, y),
        (Some(x), None) => (x, x),
        (None, Some(y)) => (y, y),
        (None, None) => ([0.0, 0.0, 1.0], [0.0, 0.0, 1.0]),
    };
    if crate::geometry::dot(ua, ub) < 0.0 {
        (ua, [-ub[0], -ub[1], -ub[2]], -tb)
    } else {
        (ua, ub, tb)
    }
}

/// `steps` poses from `a` to `b` inclusive. Axes are sign-aligned per
/// bone, angles and the root translation move linearly, and the endpoints
/// are returned unchanged.
pub fn interpolate_poses(a: &Pose, b: &Pose, steps: usize) -> Result<Vec<Pose>> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    b.check_arity(a.bones.len())?;
    a.check_arity(a.bones.len())?;
    let blend = |ax: Vec3<f64>, ta: f64, bx: Vec3<f64>, tb: f64, s: f64| {
        let (ua, ub, tb) = aligned_pair(ax, ta, bx, tb);
        let m = [0, 1, 2].map(|k| ua[k] + (ub[k] - ua[k]) * s);
        let n = crate::geometry::norm(m);
        let axis = if n > 0.0 { [m[0] / n, m[1] / n, m[2] / n] } else { ua };
        (axis, ta + (tb - ta) * s)
    };
    let mut out = Vec::with_capacity(steps);
    out.push(a.clone());
    for k in 1..steps - 1 {
        let s = k as f64 / (steps - 1) as f64;
        let bones = a
            .bones
            .iter()
            .zip(&b.bones)
            .map(|(x, y)| {
                let (axis, angle) = blend(x.axis, x.angle, y.axis, y.angle, s);
                BonePose { axis, angle }
            })
            .collect();
        let (axis, angle) = blend(a.root.axis, a.root.angle, b.root.axis, b.root.angle, s);
        let translation = [0, 1, 2].map(|i| a.root.translation[i] + (b.root.translation[i] - a.root.translation[i]) * s);
        out.push(Pose {
            bones,
            root: RootMotion {
                axis,
                angle,
                translation,
            },
        });
    }
    out.push(b.clone());
    Ok(out)
}

/// Raw skinning logits and the softmax temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinningWeights {
    /// `[N, columns]`
    pub raw: Tensor<f64>,
    pub alpha: f64,
    /// set once weights were merged in normalized space
    pub alpha_frozen: bool,
}

impl SkinningWeights {
    pub fn init(points: &[Vec3<f64>], skeleton: &Skeleton) -> Self {
        Self {
            raw: init_weights(points, skeleton),
            alpha: DEFAULT_ALPHA,
            alpha_frozen: false,
        }
    }

    /// Stores already-normalized weights as logits with unit temperature.
    pub fn from_normalized(w: &Tensor<f64>) -> Self {
        Self {
            raw: w.map(|x| x.max(1e-300).ln()),
            alpha: 1.0,
            alpha_frozen: true,
        }
    }

    pub fn normalized(&self) -> Result<Tensor<f64>> {
        normalize_weights(&self.raw, self.alpha)
    }
}

/// `exp(-distance)` to every bone segment. A root column, when present,
/// decays with the distance to the root joint; without bones it is the
/// only column.
pub fn init_weights(points: &[Vec3<f64>], skeleton: &Skeleton) -> Tensor<f64> {
    let segs = skeleton.segments();
    let cols = skeleton.weight_columns();
    let root = skeleton.joints()[skeleton.root()];
    let mut data = Vec::with_capacity(points.len() * cols);
    for p in points {
        for (a, b) in &segs {
            data.push((-point_segment_distance(*p, *a, *b)).exp());
        }
        if skeleton.has_root_column() {
            data.push((-crate::geometry::norm(sub(*p, root))).exp());
        }
    }
    Tensor::new(&[points.len(), cols], data).expect("n×cols")
}

/// Row-wise `softmax(raw / alpha)`.
pub fn normalize_weights(raw: &Tensor<f64>, alpha: f64) -> Result<Tensor<f64>> {
    check_alpha(alpha)?;
    let tape = Tape::new();
    let w = tape.constant(raw.clone()).scale(1.0 / alpha).softmax();
    Ok((*w.value()).clone())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("softmax temperature must be positive, got {alpha}")))
    }
}

/// Tape counterpart of [`normalize_weights`]; `alpha` is a `[1]` variable.
pub fn normalize_weights_var<'t>(raw: Var<'t, f64>, alpha: Var<'t, f64>) -> Result<Var<'t, f64>> {
    check_alpha(alpha.item())?;
    Ok(raw.div(alpha)?.softmax())
}

/// Global per-column transforms for a pose: one per bone, then the root
/// motion for the root column if present.
#[derive(Clone, Debug, PartialEq)]
pub struct BoneTransforms {
    pub bones: Vec<RigidF>,
    pub root: RigidF,
    root_column: bool,
}

impl BoneTransforms {
    pub fn columns(&self) -> Vec<RigidF> {
        let mut v = self.bones.clone();
        if self.root_column {
            v.push(self.root);
        }
        v
    }

    /// Composes every transform with `g` from the left.
    pub fn premultiply(&self, g: &RigidF) -> Self {
        Self {
            bones: self.bones.iter().map(|b| g.compose(b)).collect(),
            root: g.compose(&self.root),
            root_column: self.root_column,
        }
    }
}

type RigidF = crate::geometry::Rigid<f64>;

/// Root motion: rotation about the root joint followed by translation.
pub fn root_transform(skeleton: &Skeleton, root: &RootMotion) -> RigidF {
    let j = skeleton.joints()[skeleton.root()];
    let mut g = Rigid::about_pivot(rodrigues(root.axis, root.angle), j);
    for a in 0..3 {
        g.trans[a] += root.translation[a];
    }
    g
}

/// Global bone transforms. Each bone rotates about its parent joint and
/// inherits the transform of the bone ending at that joint; the root
/// motion is applied outermost.
pub fn forward_kinematics(skeleton: &Skeleton, pose: &Pose) -> Result<BoneTransforms> {
    pose.check_arity(skeleton.num_bones())?;
    let mut global: Vec<Option<RigidF>> = vec![None; skeleton.num_bones()];
    for j in skeleton.topo_order() {
        let Some(b) = skeleton.bone_of_joint(j) else {
            continue;
        };
        let p = skeleton.parents()[j].expect("bone joint has parent");
        let bp = pose.bones[b];
        let local = Rigid::about_pivot(rodrigues(bp.axis, bp.angle), skeleton.joints()[p]);
        global[b] = Some(match skeleton.bone_of_joint(p) {
            Some(pb) => global[pb].expect("parents first").compose(&local),
            None => local,
        });
    }
    let g = root_transform(skeleton, &pose.root);
    Ok(BoneTransforms {
        bones: global.into_iter().map(|t| g.compose(&t.expect("all bones visited"))).collect(),
        root: g,
        root_column: skeleton.has_root_column(),
    })
}

/// Warped points and blended `[R̄ | t̄]` per point (row-major 12 values).
#[derive(Clone, Debug, PartialEq)]
pub struct Warp {
    pub points: Vec<Vec3<f64>>,
    pub blended: Vec<[f64; 12]>,
}

/// Linear blend skinning, evaluated as `p + Σ_b w_b (T_b p − p)`.
pub fn lbs_warp(points: &[Vec3<f64>], weights: &Tensor<f64>, columns: &[RigidF]) -> Result<Warp> {
    if weights.rank() != 2 || weights.shape()[0] != points.len() || weights.shape()[1] != columns.len() {
        return Err(Error::InvalidArgument(format!(
            "weights {:?} incompatible with {} points and {} transforms",
            weights.shape(),
            points.len(),
            columns.len()
        )));
    }
    let rows: Vec<[f64; 12]> = columns.iter().map(Rigid::to_row12).collect();
    let mut out = Vec::with_capacity(points.len());
    let mut blended = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let w = weights.row(i);
        let mut q = *p;
        let mut bl = [0.0; 12];
        for (c, t) in columns.iter().enumerate() {
            let tp = t.apply(*p);
            for a in 0..3 {
                q[a] += w[c] * (tp[a] - p[a]);
            }
            for (k, v) in rows[c].iter().enumerate() {
                bl[k] += w[c] * v;
            }
        }
        out.push(q);
        blended.push(bl);
    }
    Ok(Warp { points: out, blended })
}

fn rodrigues_var<'t>(axis: Var<'t, f64>, angle: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let tape = axis.tape();
    let n = axis.square().sum().sqrt();
    if n.item() < AXIS_EPS {
        return Ok(tape.constant(Tensor::new(&[3, 3], crate::geometry::identity3::<f64>().concat())?));
    }
    let k = axis.div(n)?;
    let zero = tape.constant(Tensor::zeros(&[1]));
    let c = |i| k.col(i);
    let (k0, k1, k2) = (c(0)?, c(1)?, c(2)?);
    let skew = tape
        .concat(&[zero, k2.neg(), k1, k2, zero, k0.neg(), k1.neg(), k0, zero], 0)?
        .reshape(&[3, 3])?;
    let skew2 = skew.matmul(skew)?;
    let eye = tape.constant(Tensor::new(&[3, 3], crate::geometry::identity3::<f64>().concat())?);
    let s = angle.sin();
    let one_minus_c = angle.cos().neg().add_scalar(1.0);
    Ok(eye.add(skew.mul(s)?)?.add(skew2.mul(one_minus_c)?)?)
}

/// `(R, t)` with `R` `[3,3]` and `t` `[3,1]`.
type RigidVar<'t> = (Var<'t, f64>, Var<'t, f64>);

fn about_pivot_var<'t>(rot: Var<'t, f64>, pivot: Var<'t, f64>) -> Result<RigidVar<'t>> {
    let p = pivot.reshape(&[3, 1])?;
    Ok((rot, p.sub(rot.matmul(p)?)?))
}

fn compose_var<'t>(a: RigidVar<'t>, b: RigidVar<'t>) -> Result<RigidVar<'t>> {
    Ok((a.0.matmul(b.0)?, a.0.matmul(b.1)?.add(a.1)?))
}

fn row12_var<'t>(t: RigidVar<'t>) -> Result<Var<'t, f64>> {
    let tape = t.0.tape();
    let r = t.0.reshape(&[1, 9])?;
    let tr = t.1.reshape(&[1, 3])?;
    Ok(tape.concat(&[r, tr], 1)?)
}

/// Differentiable forward kinematics: `joints` is `[J,3]`, `pose` the flat
/// `[4B+7]` vector. Returns per-column `[R | t]` rows, `[C, 12]`.
pub fn column_transforms_var<'t>(skeleton: &Skeleton, joints: Var<'t, f64>, pose: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let nb = skeleton.num_bones();
    if pose.shape() != [4 * nb + 7] {
        return Err(Error::PoseArity {
            expected: nb,
            got: pose.shape().iter().product::<usize>().saturating_sub(7) / 4,
        });
    }
    if joints.shape() != [skeleton.num_joints(), 3] {
        return Err(Error::InvalidArgument(format!(
            "joint tensor {:?} does not match {} joints",
            joints.shape(),
            skeleton.num_joints()
        )));
    }
    let joint = |j: usize| joints.gather_rows(&[j]);
    let r = 4 * nb;
    let root_rot = rodrigues_var(pose.select_cols(&[r, r + 1, r + 2])?, pose.col(r + 3)?)?;
    let (gr, gt) = about_pivot_var(root_rot, joint(skeleton.root())?)?;
    let g = (gr, gt.add(pose.select_cols(&[r + 4, r + 5, r + 6])?.reshape(&[3, 1])?)?);

    let mut global: Vec<Option<RigidVar<'t>>> = vec![None; nb];
    for j in skeleton.topo_order() {
        let Some(b) = skeleton.bone_of_joint(j) else {
            continue;
        };
        let p = skeleton.parents()[j].expect("bone joint has parent");
        let rot = rodrigues_var(pose.select_cols(&[4 * b, 4 * b + 1, 4 * b + 2])?, pose.col(4 * b + 3)?)?;
        let local = about_pivot_var(rot, joint(p)?)?;
        global[b] = Some(match skeleton.bone_of_joint(p) {
            Some(pb) => compose_var(global[pb].expect("parents first"), local)?,
            None => local,
        });
    }
    let mut rows = Vec::with_capacity(skeleton.weight_columns());
    for t in global {
        rows.push(row12_var(compose_var(g, t.expect("all bones visited"))?)?);
    }
    if skeleton.has_root_column() {
        rows.push(row12_var(g)?);
    }
    Ok(joints.tape().concat(&rows, 0)?)
}

/// Differentiable LBS. `points` `[N,3]`, `weights` `[N,C]`, `columns`
/// `[C,12]`. Returns warped points `[N,3]` and blended rows `[N,12]`.
pub fn lbs_warp_var<'t>(
    points: Var<'t, f64>,
    weights: Var<'t, f64>,
    columns: Var<'t, f64>,
) -> Result<(Var<'t, f64>, Var<'t, f64>)> {
    let tape = points.tape();
    let n = points.shape()[0];
    let c = columns.shape()[0];
    if weights.shape() != [n, c] {
        return Err(Error::InvalidArgument(format!(
            "weights {:?} incompatible with {n} points and {c} transforms",
            weights.shape()
        )));
    }
    // [R − I | t] per column, permuted into a [4, 3C] right factor
    let mut eye = vec![0.0; c * 12];
    for k in 0..c {
        for d in 0..3 {
            eye[k * 12 + 4 * d] = 1.0;
        }
    }
    let delta = columns.sub(tape.constant(Tensor::new(&[c, 12], eye)?))?;
    let mut perm = Vec::with_capacity(12 * c);
    for k in 0..4 {
        for col in 0..c {
            for i in 0..3 {
                perm.push(col * 12 + if k < 3 { 3 * i + k } else { 9 + i });
            }
        }
    }
    let q = delta.reshape(&[c * 12, 1])?.gather_rows(&perm)?.reshape(&[4, 3 * c])?;
    let ones = tape.constant(Tensor::ones(&[n, 1]));
    let ph = tape.concat(&[points, ones], 1)?;
    let disp = ph.matmul(q)?.reshape(&[n, c, 3])?;
    let moved = weights.reshape(&[n, 1, c])?.matmul(disp)?.reshape(&[n, 3])?;
    let warped = points.add(moved)?;
    let blended = weights.matmul(columns)?;
    Ok((warped, blended))
}

/// `Φ_r`: maps normalized time to a flat pose vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRegressor {
    pub mlp: Mlp<f64>,
    pub bones: usize,
    pub bands: usize,
}

impl PoseRegressor {
    pub fn new(bones: usize, bands: usize, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![posenc_dim(1, bands)];
        sizes.extend(std::iter::repeat_n(REGRESSOR_WIDTH, REGRESSOR_LAYERS));
        sizes.push(4 * bones + 7);
        let mut mlp = Mlp::new(&sizes, rng);
        // only angles and the translation start small; axes keep their
        // full scale so their normalization stays well conditioned
        let out = 4 * bones + 7;
        let small = |c: usize| c >= 4 * bones + 3 || c % 4 == 3;
        let last = mlp.last_mut();
        let w: Vec<f64> = last
            .weight
            .data()
            .iter()
            .enumerate()
            .map(|(i, &w)| if small(i % out) { w * REGRESSOR_OUTPUT_SCALE } else { w })
            .collect();
        last.weight = Tensor::new(last.weight.shape(), w).expect("same shape");
        Self { mlp, bones, bands }
    }

    pub fn arity(&self) -> usize {
        4 * self.bones + 7
    }

    pub fn eval(&self, t: f64) -> Result<Pose> {
        let x = Tensor::new(&[1, posenc_dim(1, self.bands)], posenc_values(&[t], self.bands))?;
        let out = self.mlp.eval(x)?;
        Pose::from_flat(self.bones, out.data())
    }

    /// Flat pose `[4B+7]` on the tape for the bound network.
    pub fn forward_var<'t>(
        &self,
        net: &crate::nn::MlpVars<'t, f64>,
        tape: &'t Tape<f64>,
        t: f64,
    ) -> Result<Var<'t, f64>> {
        let x = posenc(tape.constant(Tensor::new(&[1, 1], vec![t])?), self.bands)?;
        Ok(net.forward(x)?.reshape(&[self.arity()])?)
    }

    /// Regressor for a simplified skeleton. `pose_source[k]` names the old
    /// bone driving new bone `k`; `None` outputs a fixed rest rotation.
    pub fn remap(&self, pose_source: &[Option<usize>]) -> Self {
        let mut mlp = self.mlp.clone();
        let old_last = self.mlp.layers.last().expect("non-empty");
        let width = old_last.inputs();
        let old_out = self.arity();
        let new_out = 4 * pose_source.len() + 7;
        let mut src_cols: Vec<Option<usize>> = Vec::with_capacity(new_out);
        for s in pose_source {
            for k in 0..4 {
                src_cols.push(s.map(|b| 4 * b + k));
            }
        }
        for k in 0..7 {
            src_cols.push(Some(4 * self.bones + k));
        }
        let mut w = vec![0.0; width * new_out];
        let mut b = vec![0.0; new_out];
        for (nc, sc) in src_cols.iter().enumerate() {
            match sc {
                Some(sc) => {
                    for r in 0..width {
                        w[r * new_out + nc] = old_last.weight.data()[r * old_out + sc];
                    }
                    b[nc] = old_last.bias.data()[*sc];
                }
                // unit z axis with zero angle
                None if nc % 4 == 2 => b[nc] = 1.0,
                None => {}
            }
        }
        let last = mlp.last_mut();
        last.weight = Tensor::new(&[width, new_out], w).expect("shape");
        last.bias = Tensor::new(&[new_out], b).expect("shape");
        Self {
            mlp,
            bones: pose_source.len(),
            bands: self.bands,
        }
    }
}
