//! Training objectives. Plain-value versions are the reference; the `_var`
//! versions build the same quantity on the tape.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::render::Camera;

/// Clamp applied to weights before the entropy logs.
pub const SPARSE_EPS: f64 = 1e-7;
/// Subsample cap for the silhouette term.
pub const DEFAULT_MASK_SUBSAMPLE: usize = 3000;
/// Neighborhood size for the rigidity and smoothness terms.
pub const DEFAULT_REG_NEIGHBORS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl Reduction {
    fn apply<'t>(self, v: Var<'t, f64>) -> Var<'t, f64> {
        match self {
            Reduction::Sum => v.sum(),
            Reduction::Mean => v.mean(),
        }
    }
}

pub fn photometric(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "pixel counts differ: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(s / (3 * pred.len()) as f64)
}

/// Mean squared error of `[R,3]` predictions against `[R,3]` targets.
pub fn photometric_var<'t>(pred: Var<'t, f64>, target: &Tensor<f64>) -> Result<Var<'t, f64>> {
    if pred.shape() != target.shape() {
        return Err(Error::InvalidArgument(format!(
            "pixel counts differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let t = pred.tape().constant(target.clone());
    Ok(pred.sub(t)?.square().mean())
}

fn d2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for k in 0..D {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}

/// Index of the nearest `set` point for every query. Ties keep the lowest
/// index. Sorting on the first coordinate prunes the scan; the distances
/// are the same expressions the full scan evaluates.
pub fn nearest<const D: usize>(queries: &[[f64; D]], set: &[[f64; D]]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&i, &j| set[i][0].total_cmp(&set[j][0]).then(i.cmp(&j)));
    let xs: Vec<f64> = order.iter().map(|&i| set[i][0]).collect();
    queries
        .iter()
        .map(|q| {
            let start = xs.partition_point(|&x| x < q[0]);
            let mut best = f64::INFINITY;
            let mut arg = usize::MAX;
            let mut visit = |k: usize| -> bool {
                let dx = xs[k] - q[0];
                if dx * dx > best {
                    return false;
                }
                let i = order[k];
                let d = d2(q, &set[i]);
                if d < best || (d == best && i < arg) {
                    best = d;
                    arg = i;
                }
                true
            };
            let mut hi = start;
            let mut lo = start;
            let (mut up, mut down) = (true, true);
            while up || down {
                if up {
                    if hi < xs.len() && visit(hi) {
                        hi += 1;
                    } else {
                        up = false;
                    }
                }
                if down {
                    if lo > 0 && visit(lo - 1) {
                        lo -= 1;
                    } else {
                        down = false;
                    }
                }
            }
            arg
        })
        .collect()
}

fn chamfer_plain<const D: usize>(a: &[[f64; D]], b: &[[f64; D]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("chamfer distance needs two non-empty sets".into()));
    }
    let na = nearest(a, b);
    let nb = nearest(b, a);
    let fwd: f64 = a.iter().zip(&na).map(|(p, &j)| d2(p, &b[j])).sum();
    let bwd: f64 = b.iter().zip(&nb).map(|(p, &j)| d2(p, &a[j])).sum();
    Ok(fwd / a.len() as f64 + bwd / b.len() as f64)
}

/// Symmetric mean of squared nearest-neighbor distances in the plane.
pub fn chamfer_2d(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    chamfer_plain(a, b)
}

pub fn chamfer_3d(a: &[Vec3<f64>], b: &[Vec3<f64>]) -> Result<f64> {
    chamfer_plain(a, b)
}

fn rows<const D: usize>(t: &Tensor<f64>) -> Vec<[f64; D]> {
    t.data()
        .chunks(D)
        .map(|c| {
            let mut r = [0.0; D];
            r.copy_from_slice(c);
            r
        })
        .collect()
}

/// Chamfer distance between two `[n,D]` vars. The nearest-neighbor choice
/// is made on values; gradients flow through the chosen pairs only.
pub fn chamfer_var<'t, const D: usize>(a: Var<'t, f64>, b: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let (av, bv) = (a.value(), b.value());
    if av.numel() == 0 || bv.numel() == 0 {
        return Err(Error::InvalidArgument("chamfer distance needs two non-empty sets".into()));
    }
    let (pa, pb) = (rows::<D>(&av), rows::<D>(&bv));
    let na = nearest(&pa, &pb);
    let nb = nearest(&pb, &pa);
    let fwd = a.sub(b.gather_rows(&na)?)?.square().sum_last().mean();
    let bwd = b.sub(a.gather_rows(&nb)?)?.square().sum_last().mean();
    Ok(fwd.add(bwd)?)
}

/// Pixel-center coordinates of foreground mask entries (value > 127).
pub fn mask_pixels(mask: &[u8], width: usize) -> Vec<[f64; 2]> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m > 127)
        .map(|(i, _)| [(i % width) as f64 + 0.5, (i / width) as f64 + 0.5])
        .collect()
}

/// Pixel coordinates `[N,2]` of `[N,3]` world points.
pub fn project_var<'t>(points: Var<'t, f64>, camera: &Camera) -> Result<Var<'t, f64>> {
    let tape = points.tape();
    let o = camera.position();
    let r = camera.rotation();
    // rows: (p - o) · R gives camera-frame coordinates
    let rm: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| r[i][j])).collect();
    let local = points
        .sub(tape.constant(Tensor::from_vec(o.to_vec())))?
        .matmul(tape.constant(Tensor::new(&[3, 3], rm)?))?;
    let depth = local.col(2)?.neg();
    let u = local.col(0)?.div(depth)?.scale(camera.fx).add_scalar(camera.cx);
    let v = local.col(1)?.div(depth)?.scale(-camera.fy).add_scalar(camera.cy);
    Ok(tape.concat(&[u, v], 1)?)
}

fn subsample_idx(n: usize, cap: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, cap).into_vec();
        v.sort_unstable();
        v
    }
}

/// Silhouette term: chamfer between projected points and foreground pixel
/// coordinates, both subsampled to `cap`. `None` when the mask is empty or
/// nothing projects in front of the camera.
pub fn mask_loss_var<'t>(
    points: Var<'t, f64>,
    camera: &Camera,
    mask: &[u8],
    cap: usize,
    rng: &mut impl Rng,
) -> Result<Option<Var<'t, f64>>> {
    let fg = mask_pixels(mask, camera.width);
    if fg.is_empty() {
        log::warn!("empty mask for camera {}; silhouette term skipped", camera.id);
        return Ok(None);
    }
    let pv = points.value();
    let front: Vec<usize> = rows::<3>(&pv)
        .iter()
        .enumerate()
        .filter(|(_, p)| camera.project(**p).is_some())
        .map(|(i, _)| i)
        .collect();
    if front.is_empty() {
        return Ok(None);
    }
    let pick = subsample_idx(front.len(), cap, rng);
    let idx: Vec<usize> = pick.iter().map(|&k| front[k]).collect();
    let proj = project_var(points.gather_rows(&idx)?, camera)?;
    let fpick = subsample_idx(fg.len(), cap, rng);
    let target: Vec<f64> = fpick.iter().flat_map(|&k| fg[k]).collect();
    let target = points.tape().constant(Tensor::new(&[fpick.len(), 2], target)?);
    Ok(Some(chamfer_var::<2>(proj, target)?))
}

/// Chamfer between constant medial points and joint positions `[J,3]`.
pub fn skel_loss_var<'t>(medial: &[Vec3<f64>], joints: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let m = joints
        .tape()
        .constant(Tensor::new(&[medial.len(), 3], medial.concat())?);
    chamfer_var::<3>(m, joints)
}

/// Sum of absolute bone angles plus the Euclidean norm of the root
/// translation, from a flat `[4B+7]` pose.
pub fn tranf_loss_var<'t>(pose: Var<'t, f64>, bones: usize) -> Result<Var<'t, f64>> {
    let n = pose.shape()[0];
    if n != 4 * bones + 7 {
        return Err(Error::PoseArity {
            expected: bones,
            got: n.saturating_sub(7) / 4,
        });
    }
    let r = 4 * bones;
    let t = pose.select_cols(&[r + 4, r + 5, r + 6])?.square().sum().sqrt();
    if bones == 0 {
        return Ok(t);
    }
    let angles: Vec<usize> = (0..bones).map(|b| 4 * b + 3).collect();
    Ok(pose.select_cols(&angles)?.abs().sum().add(t)?)
}

pub fn tranf_loss(pose: &crate::kinematics::Pose) -> f64 {
    pose.bones.iter().map(|b| b.angle.abs()).sum::<f64>() + geometry::norm(pose.root.translation)
}

/// `k` nearest canonical neighbors of every point (self excluded), as
/// directed pairs `(i, j)`.
pub fn knn_pairs(points: &[Vec3<f64>], k: usize) -> Vec<(usize, usize)> {
    if points.len() < 2 || k == 0 {
        return Vec::new();
    }
    let b = crate::voxel_seed::bounds_of(points).expect("non-empty");
    let ext = b.extent();
    let vol = (ext[0].max(1e-9)) * (ext[1].max(1e-9)) * (ext[2].max(1e-9));
    // radius that holds about 2k points on average, grown until enough are found
    let mut radius = (vol * 2.0 * k as f64 / points.len() as f64).cbrt().max(1e-9);
    let want = k.min(points.len() - 1);
    let mut out = Vec::with_capacity(points.len() * want);
    let mut pending: Vec<usize> = (0..points.len()).collect();
    while !pending.is_empty() {
        let grid = crate::render::HashGrid::build(points, radius);
        let mut next = Vec::new();
        for &i in &pending {
            let nb = grid.query(points[i], want + 1);
            let nb: Vec<usize> = nb.into_iter().filter(|&j| j != i).take(want).collect();
            if nb.len() < want {
                next.push(i);
            } else {
                out.extend(nb.into_iter().map(|j| (i, j)));
            }
        }
        pending = next;
        radius *= 2.0;
    }
    out.sort_unstable();
    out
}

/// `|‖c_i − c_j‖² − ‖w_i − w_j‖²|` over the pairs.
pub fn arap_loss_var<'t>(
    canonical: &[Vec3<f64>],
    warped: Var<'t, f64>,
    pairs: &[(usize, usize)],
    reduction: Reduction,
) -> Result<Var<'t, f64>> {
    let tape = warped.tape();
    if pairs.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let rest: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| geometry::dist2(canonical[i], canonical[j]))
        .collect();
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let cur = warped.gather_rows(&is)?.sub(warped.gather_rows(&js)?)?.square().sum_last();
    let rest = tape.constant(Tensor::new(&[pairs.len()], rest)?);
    Ok(reduction.apply(rest.sub(cur)?.abs()))
}

/// L1 distance between neighboring weight rows `[N,C]`.
pub fn smooth_loss_var<'t>(weights: Var<'t, f64>, pairs: &[(usize, usize)], reduction: Reduction) -> Result<Var<'t, f64>> {
    if pairs.is_empty() {
        return Ok(weights.tape().scalar(0.0));
    }
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let d = weights.gather_rows(&is)?.sub(weights.gather_rows(&js)?)?.abs().sum_last();
    Ok(reduction.apply(d))
}

/// Binary entropy of every weight entry, minimized at 0 and 1.
pub fn sparse_loss_var<'t>(weights: Var<'t, f64>, reduction: Reduction) -> Var<'t, f64> {
    let w = weights.clamp(SPARSE_EPS, 1.0 - SPARSE_EPS);
    let q = w.neg().add_scalar(1.0);
    let h = w.mul(w.log()).expect("same shape").add(q.mul(q.log()).expect("same shape")).expect("same shape");
    let h = h.neg();
    match reduction {
        Reduction::Sum => h.sum(),
        // per point, summed over columns
        Reduction::Mean => h.sum_last().mean(),
    }
}

pub fn sparse_loss(weights: &[f64]) -> f64 {
    weights
        .iter()
        .map(|&w| {
            let w = w.clamp(SPARSE_EPS, 1.0 - SPARSE_EPS);
            -(w * w.ln() + (1.0 - w) * (1.0 - w).ln())
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub photo: f64,
    pub mask: f64,
    pub skel: f64,
    pub tranf: f64,
    pub smooth: f64,
    pub sparse: f64,
    pub arap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            photo: 200.0,
            mask: 0.02,
            skel: 1.0,
            tranf: 0.1,
            smooth: 10.0,
            sparse: 0.2,
            arap: 0.005,
        }
    }
}

pub const TERM_NAMES: [&str; 7] = ["photo", "mask", "skel", "tranf", "smooth", "sparse", "arap"];

impl LossWeights {
    pub fn as_array(&self) -> [f64; 7] {
        [self.photo, self.mask, self.skel, self.tranf, self.smooth, self.sparse, self.arap]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub raw: f64,
    pub weighted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub photo: Term,
    pub mask: Term,
    pub skel: Term,
    pub tranf: Term,
    pub smooth: Term,
    pub sparse: Term,
    pub arap: Term,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [&Term; 7] {
        [&self.photo, &self.mask, &self.skel, &self.tranf, &self.smooth, &self.sparse, &self.arap]
    }
}

/// Raw term values in [`TERM_NAMES`] order; `None` means skipped.
pub type RawTerms<'t> = [Option<Var<'t, f64>>; 7];

/// Weighted sum of the present terms plus the bookkeeping report.
pub fn total_loss<'t>(tape: &'t Tape<f64>, terms: &RawTerms<'t>, weights: &LossWeights) -> Result<(Var<'t, f64>, LossReport)> {
    let w = weights.as_array();
    let mut total = tape.scalar(0.0);
    let mut rep = Vec::with_capacity(7);
    let mut sum = 0.0;
    for (k, t) in terms.iter().enumerate() {
        let raw = t.map(|v| v.item()).unwrap_or(0.0);
        if !raw.is_finite() {
            return Err(Error::NonFinite(format!("{} loss", TERM_NAMES[k])));
        }
        if let Some(v) = t {
            total = total.add(v.scale(w[k]))?;
        }
        sum += w[k] * raw;
        rep.push(Term {
            raw,
            weighted: w[k] * raw,
        });
    }
    let mut it = rep.into_iter();
    let mut next = || it.next().expect("seven terms");
    let report = LossReport {
        photo: next(),
        mask: next(),
        skel: next(),
        tranf: next(),
        smooth: next(),
        sparse: next(),
        arap: next(),
        total: sum,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute<const D: usize>(a: &[[f64; D]], b: &[[f64; D]]) -> f64 {
        let dir = |x: &[[f64; D]], y: &[[f64; D]]| {
            x.iter()
                .map(|p| y.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        dir(a, b) + dir(b, a)
    }

    #[test]
    fn photometric_examples() {
        let a = vec![[0.2, 0.4, 0.6]; 5];
        assert_eq!(photometric(&a, &a).unwrap(), 0.0);
        assert_eq!(photometric(&[[0.0; 3]; 4], &[[1.0; 3]; 4]).unwrap(), 1.0);
        assert!(photometric(&a, &a[..2]).is_err());
    }

    #[test]
    fn chamfer_examples() {
        assert_eq!(chamfer_2d(&[[0.0, 0.0]], &[[3.0, 4.0]]).unwrap(), 50.0);
        let a = [[1.0, 2.0], [3.0, -1.0]];
        assert_eq!(chamfer_2d(&a, &a).unwrap(), 0.0);
        assert!(chamfer_2d(&[], &a).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<[f64; 2]> = (0..50).map(|_| [rng.random(), rng.random()]).collect();
        let b: Vec<[f64; 2]> = (0..60).map(|_| [rng.random(), rng.random()]).collect();
        assert_eq!(chamfer_2d(&a, &b).unwrap(), brute(&a, &b));
    }

    #[test]
    fn nearest_handles_duplicates() {
        let set = [[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]];
        assert_eq!(nearest(&[[1.0, 0.0], [0.4, 0.0]], &set), vec![0, 2]);
    }

    #[test]
    fn tranf_examples() {
        let tape = Tape::new();
        let mut p = vec![0.0; 4 * 2 + 7];
        p[3] = 0.3;
        p[7] = -0.3;
        let v = tranf_loss_var(tape.constant(Tensor::from_vec(p.clone())), 2).unwrap();
        assert!((v.item() - 0.6).abs() < 1e-15);
        p[3] = 0.0;
        p[7] = 0.0;
        p[12] = 3.0;
        p[13] = 4.0;
        let v = tranf_loss_var(tape.constant(Tensor::from_vec(p)), 2).unwrap();
        assert_eq!(v.item(), 5.0);
    }

    #[test]
    fn arap_examples() {
        let tape = Tape::new();
        let c = [[0.0; 3], [1.0, 0.0, 0.0]];
        let w = tape.constant(Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap());
        let v = arap_loss_var(&c, w, &[(0, 1), (1, 0)], Reduction::Sum).unwrap();
        assert_eq!(v.item(), 6.0);
        let v = arap_loss_var(&c, w, &[(0, 1), (1, 0)], Reduction::Mean).unwrap();
        assert_eq!(v.item(), 3.0);
    }

    #[test]
    fn smooth_and_sparse_examples() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert_eq!(smooth_loss_var(w, &[(0, 1)], Reduction::Sum).unwrap().item(), 2.0);
        let h = tape.constant(Tensor::new(&[1, 1], vec![0.5]).unwrap());
        assert!((sparse_loss_var(h, Reduction::Sum).item() - 2f64.ln()).abs() < 1e-15);
        assert!(sparse_loss(&[0.0, 1.0]) < 1e-5);
        assert!(sparse_loss(&[0.5]) > sparse_loss(&[0.01]));
    }

    #[test]
    fn knn_pairs_are_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3<f64>> = (0..200).map(|_| [rng.random(), rng.random(), rng.random::<f64>() * 0.1]).collect();
        let pairs = knn_pairs(&pts, 8);
        assert_eq!(pairs.len(), 200 * 8);
        for i in [0usize, 17, 199] {
            let mut all: Vec<(f64, usize)> = (0..200)
                .filter(|&j| j != i)
                .map(|j| (geometry::dist2(pts[i], pts[j]), j))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut want: Vec<usize> = all[..8].iter().map(|x| x.1).collect();
            want.sort();
            let got: Vec<usize> = pairs.iter().filter(|p| p.0 == i).map(|p| p.1).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn report_bookkeeping() {
        let tape = Tape::new();
        let mut terms: RawTerms = [None; 7];
        let (t, r) = total_loss(&tape, &terms, &LossWeights::default()).unwrap();
        assert_eq!((t.item(), r.total), (0.0, 0.0));
        terms[2] = Some(tape.scalar(0.75));
        terms[4] = Some(tape.scalar(0.5));
        let (t, r) = total_loss(&tape, &terms, &LossWeights::default()).unwrap();
        assert_eq!(t.item(), 0.75 + 5.0);
        assert_eq!(r.total, r.terms().iter().map(|x| x.weighted).sum::<f64>());
        terms[0] = Some(tape.scalar(f64::NAN));
        assert!(total_loss(&tape, &terms, &LossWeights::default()).is_err());
    }

    #[test]
    fn chamfer_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b: Vec<f64> = (0..14).map(|_| rng.random()).collect();
        let x = Tensor::new(&[5, 2], (0..10).map(|_| rng.random()).collect()).unwrap();
        let rep = gradcheck(
            |tape, x| {
                let bv = tape.constant(Tensor::new(&[7, 2], b.clone()).unwrap());
                Ok(chamfer_var::<2>(x, bv).unwrap())
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn projection_matches_camera() {
        let c = Camera::look_at(0, [0.5, 2.0, 3.0], [0.0; 3], [0.0, 0.0, 1.0], 32, 24, 50.0);
        let pts = [[0.1, 0.2, -0.1], [-0.3, 0.0, 0.4]];
        let tape = Tape::new();
        let v = project_var(tape.constant(Tensor::new(&[2, 3], pts.concat()).unwrap()), &c).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let want = c.project(*p).unwrap();
            assert!((v.value().data()[2 * i] - want[0]).abs() < 1e-12);
            assert!((v.value().data()[2 * i + 1] - want[1]).abs() < 1e-12);
        }
    }
}
