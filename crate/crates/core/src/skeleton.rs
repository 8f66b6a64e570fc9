//! Kinematic tree recovery from the canonical shape and post-training
//! simplification.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{self, mat_mul, rodrigues, rotation_angle, transpose, Vec3};
use crate::kinematics::Pose;
use crate::voxel_seed::{neighbor_offsets, voxel_center, Aabb, BinaryVolume, CleanVolume};

/// Default BFS bone length in medial-graph edges.
pub const DEFAULT_BONE_LENGTH: usize = 10;
/// Default staticity threshold in degrees.
pub const DEFAULT_STATIC_THRESHOLD_DEG: f64 = 20.0;
/// A joint moves if it exceeds the threshold in strictly more than this
/// fraction of timestamps.
pub const MOVING_FRACTION: f64 = 0.05;

/// Tree of joints. Joint `k` with a parent owns one bone; bones are ordered
/// by ascending child joint index.
///
/// `root_slot` adds a weight column that follows the root motion only. It
/// appears after simplification merges bones into the root, and implicitly
/// when there are no bones at all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "SkeletonJson", try_from = "SkeletonJson")]
pub struct Skeleton {
    joints: Vec<Vec3<f64>>,
    parents: Vec<Option<usize>>,
    root_slot: bool,
    bone_children: Vec<usize>,
    bone_of_joint: Vec<Option<usize>>,
    root: usize,
}

#[derive(Serialize, Deserialize)]
struct SkeletonJson {
    joints: Vec<Vec3<f64>>,
    parents: Vec<Option<usize>>,
    bones: Vec<[usize; 2]>,
    #[serde(default)]
    root_slot: bool,
}

impl From<Skeleton> for SkeletonJson {
    fn from(s: Skeleton) -> Self {
        SkeletonJson {
            bones: s.bones().iter().map(|&(p, c)| [p, c]).collect(),
            joints: s.joints,
            parents: s.parents,
            root_slot: s.root_slot,
        }
    }
}

impl TryFrom<SkeletonJson> for Skeleton {
    type Error = Error;

    fn try_from(j: SkeletonJson) -> Result<Self> {
        let s = Skeleton::new(j.joints, j.parents, j.root_slot)?;
        let bones: Vec<[usize; 2]> = s.bones().iter().map(|&(p, c)| [p, c]).collect();
        if bones != j.bones {
            return Err(Error::InvalidSkeleton(format!(
                "bone list {:?} disagrees with parent links (expected {:?})",
                j.bones, bones
            )));
        }
        Ok(s)
    }
}

impl Skeleton {
    pub fn new(joints: Vec<Vec3<f64>>, parents: Vec<Option<usize>>, root_slot: bool) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::InvalidSkeleton("no joints".into()));
        }
        if joints.len() != parents.len() {
            return Err(Error::InvalidSkeleton(format!(
                "{} joints but {} parent entries",
                joints.len(),
                parents.len()
            )));
        }
        if joints.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidSkeleton("non-finite joint position".into()));
        }
        let roots: Vec<usize> = (0..parents.len()).filter(|&i| parents[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::InvalidSkeleton(format!("expected exactly one root, found {}", roots.len())));
        }
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= joints.len() || p == i {
                    return Err(Error::InvalidSkeleton(format!("joint {i} has invalid parent {p}")));
                }
            }
        }
        // every joint must reach the root without revisiting
        for start in 0..parents.len() {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parents[cur] {
                cur = p;
                steps += 1;
                if steps > parents.len() {
                    return Err(Error::InvalidSkeleton(format!("cycle through joint {start}")));
                }
            }
        }
        let mut bone_of_joint = vec![None; joints.len()];
        let mut bone_children = Vec::new();
        for (i, p) in parents.iter().enumerate() {
            if p.is_some() {
                bone_of_joint[i] = Some(bone_children.len());
                bone_children.push(i);
            }
        }
        Ok(Self {
            root: roots[0],
            joints,
            parents,
            root_slot,
            bone_children,
            bone_of_joint,
        })
    }

    /// Single-joint skeleton.
    /// Joint positions for in-place optimization updates.
    pub fn joints_mut(&mut self) -> &mut [Vec3<f64>] {
        &mut self.joints
    }

    /// Replaces joint positions, keeping the topology.
    pub fn set_joints(&mut self, joints: Vec<Vec3<f64>>) -> Result<()> {
        if joints.len() != self.joints.len() {
            return Err(Error::InvalidSkeleton(format!(
                "expected {} joint positions, got {}",
                self.joints.len(),
                joints.len()
            )));
        }
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("joint positions".into()));
        }
        self.joints = joints;
        Ok(())
    }

    pub fn root_only(position: Vec3<f64>) -> Self {
        Self::new(vec![position], vec![None], true).expect("valid")
    }

    pub fn joints(&self) -> &[Vec3<f64>] {
        &self.joints
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn num_bones(&self) -> usize {
        self.bone_children.len()
    }

    /// `(parent joint, child joint)` per bone.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        self.bone_children
            .iter()
            .map(|&c| (self.parents[c].expect("bone child has a parent"), c))
            .collect()
    }

    pub fn bone_child(&self, bone: usize) -> usize {
        self.bone_children[bone]
    }

    pub fn bone_of_joint(&self, joint: usize) -> Option<usize> {
        self.bone_of_joint[joint]
    }

    pub fn has_root_column(&self) -> bool {
        self.root_slot || self.bone_children.is_empty()
    }

    /// Skinning weight columns: one per bone plus the root column if any.
    pub fn weight_columns(&self) -> usize {
        self.num_bones() + usize::from(self.has_root_column())
    }

    /// Index of the root column, always last.
    pub fn root_column(&self) -> Option<usize> {
        self.has_root_column().then(|| self.num_bones())
    }

    pub fn pose_arity(&self) -> usize {
        4 * self.num_bones() + 7
    }

    pub fn children(&self, joint: usize) -> Vec<usize> {
        (0..self.parents.len()).filter(|&c| self.parents[c] == Some(joint)).collect()
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn topo_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.joints.len());
        let mut queue = VecDeque::from([self.root]);
        while let Some(j) = queue.pop_front() {
            order.push(j);
            queue.extend(self.children(j));
        }
        order
    }

    /// Bone segments `(parent position, child position)`.
    pub fn segments(&self) -> Vec<(Vec3<f64>, Vec3<f64>)> {
        self.bones()
            .iter()
            .map(|&(p, c)| (self.joints[p], self.joints[c]))
            .collect()
    }
}

/// Thinned medial voxels with 26-neighborhood adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct MedialGraph {
    pub points: Vec<Vec3<f64>>,
    pub voxels: Vec<[usize; 3]>,
    /// sorted neighbor lists
    pub adjacency: Vec<Vec<usize>>,
}

impl MedialGraph {
    /// Builds the graph over `voxels` (in the given order) using
    /// 26-adjacency.
    pub fn from_voxels(voxels: Vec<[usize; 3]>, dims: [usize; 3], bbox: &Aabb) -> Self {
        let mut index = std::collections::HashMap::with_capacity(voxels.len());
        for (i, v) in voxels.iter().enumerate() {
            index.insert(*v, i);
        }
        let offsets = neighbor_offsets(true);
        let adjacency = voxels
            .iter()
            .map(|v| {
                let mut adj: Vec<usize> = offsets
                    .iter()
                    .filter_map(|o| {
                        let n = [
                            v[0] as isize + o[0],
                            v[1] as isize + o[1],
                            v[2] as isize + o[2],
                        ];
                        if n.iter().any(|&c| c < 0) {
                            return None;
                        }
                        index.get(&[n[0] as usize, n[1] as usize, n[2] as usize]).copied()
                    })
                    .collect();
                adj.sort_unstable();
                adj
            })
            .collect();
        Self {
            points: voxels.iter().map(|&v| voxel_center(bbox, dims, v)).collect(),
            voxels,
            adjacency,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Nodes reachable from `start`, in ascending index order.
    pub fn reachable(&self, start: usize) -> Vec<usize> {
        let mut seen = vec![false; self.len()];
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &v in &self.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        (0..self.len()).filter(|&i| seen[i]).collect()
    }

    /// Subgraph of nodes reachable from `root`; returns it with the root's
    /// new index.
    pub fn component_of(&self, root: usize) -> (MedialGraph, usize) {
        let keep = self.reachable(root);
        let mut remap = vec![usize::MAX; self.len()];
        for (n, &o) in keep.iter().enumerate() {
            remap[o] = n;
        }
        let g = MedialGraph {
            points: keep.iter().map(|&o| self.points[o]).collect(),
            voxels: keep.iter().map(|&o| self.voxels[o]).collect(),
            adjacency: keep
                .iter()
                .map(|&o| self.adjacency[o].iter().map(|&v| remap[v]).collect())
                .collect(),
        };
        (g, remap[root])
    }
}

/// Index into a 3×3×3 neighborhood, center at 13.
#[inline]
fn cell(dx: isize, dy: isize, dz: isize) -> usize {
    ((dx + 1) + 3 * (dy + 1) + 9 * (dz + 1)) as usize
}

struct Neighborhood {
    adj26: Vec<Vec<usize>>,
    adj6_n18: Vec<Vec<usize>>,
    in_n18: [bool; 27],
    face: [usize; 6],
}

impl Neighborhood {
    fn new() -> Self {
        let coord = |i: usize| [(i % 3) as isize - 1, ((i / 3) % 3) as isize - 1, (i / 9) as isize - 1];
        let mut adj26 = vec![Vec::new(); 27];
        let mut adj6_n18 = vec![Vec::new(); 27];
        let mut in_n18 = [false; 27];
        for i in 0..27 {
            let c = coord(i);
            let m = c.iter().map(|v| v.abs()).sum::<isize>();
            in_n18[i] = i != 13 && m <= 2;
        }
        for i in 0..27 {
            if i == 13 {
                continue;
            }
            let a = coord(i);
            for j in 0..27 {
                if j == 13 || j == i {
                    continue;
                }
                let b = coord(j);
                let d: Vec<isize> = (0..3).map(|k| (a[k] - b[k]).abs()).collect();
                if d.iter().all(|&x| x <= 1) {
                    adj26[i].push(j);
                    if d.iter().sum::<isize>() == 1 && in_n18[i] && in_n18[j] {
                        adj6_n18[i].push(j);
                    }
                }
            }
        }
        let face = [
            cell(-1, 0, 0),
            cell(1, 0, 0),
            cell(0, -1, 0),
            cell(0, 1, 0),
            cell(0, 0, -1),
            cell(0, 0, 1),
        ];
        Self {
            adj26,
            adj6_n18,
            in_n18,
            face,
        }
    }

    /// One foreground 26-component in N26 and one background 6-component
    /// in N18 touching a face neighbor.
    fn is_simple(&self, nb: &[bool; 27]) -> bool {
        let mut seen = [false; 27];
        let mut comps = 0;
        let mut stack = Vec::with_capacity(27);
        for s in 0..27 {
            if s == 13 || !nb[s] || seen[s] {
                continue;
            }
            comps += 1;
            if comps > 1 {
                return false;
            }
            seen[s] = true;
            stack.push(s);
            while let Some(u) = stack.pop() {
                for &v in &self.adj26[u] {
                    if nb[v] && !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        if comps != 1 {
            return false;
        }
        let mut seen = [false; 27];
        let mut comps = 0;
        for &s in &self.face {
            if nb[s] || seen[s] {
                continue;
            }
            comps += 1;
            if comps > 1 {
                return false;
            }
            seen[s] = true;
            stack.push(s);
            while let Some(u) = stack.pop() {
                for &v in &self.adj6_n18[u] {
                    if !nb[v] && !seen[v] && self.in_n18[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        comps == 1
    }
}

fn gather(vol: &BinaryVolume, v: [usize; 3]) -> [bool; 27] {
    let mut nb = [false; 27];
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                nb[cell(dx, dy, dz)] = vol.get(v[0] as isize + dx, v[1] as isize + dy, v[2] as isize + dz);
            }
        }
    }
    nb
}

/// Topology-preserving thinning with six directional sub-iterations and
/// endpoint preservation. Candidates of each sub-iteration are re-checked
/// one at a time before deletion.
pub fn thin(vol: &BinaryVolume) -> BinaryVolume {
    let hood = Neighborhood::new();
    let mut v = vol.clone();
    let mut alive: Vec<usize> = (0..v.occ.len()).filter(|&i| v.occ[i]).collect();
    let dirs: [[isize; 3]; 6] = [[0, 0, 1], [0, 0, -1], [0, 1, 0], [0, -1, 0], [1, 0, 0], [-1, 0, 0]];
    let removable = |v: &BinaryVolume, c: [usize; 3]| {
        let nb = gather(v, c);
        let count = nb.iter().filter(|&&b| b).count() - 1;
        count > 1 && hood.is_simple(&nb)
    };
    loop {
        let mut changed = false;
        for d in dirs {
            let candidates: Vec<usize> = alive
                .iter()
                .copied()
                .filter(|&i| {
                    let c = v.coords(i);
                    !v.get(c[0] as isize + d[0], c[1] as isize + d[1], c[2] as isize + d[2]) && removable(&v, c)
                })
                .collect();
            for i in candidates {
                if removable(&v, v.coords(i)) {
                    v.occ[i] = false;
                    changed = true;
                }
            }
            alive.retain(|&i| v.occ[i]);
        }
        if !changed {
            break;
        }
    }
    v
}

/// Medial axis of a cleaned volume as a graph over world-space voxel
/// centers.
pub fn medial_axis_3d(clean: &CleanVolume) -> MedialGraph {
    let thinned = thin(&clean.volume);
    let voxels = (0..thinned.occ.len())
        .filter(|&i| thinned.occ[i])
        .map(|i| thinned.coords(i))
        .collect();
    MedialGraph::from_voxels(voxels, thinned.dims, &clean.bbox)
}

/// Point minimizing the summed Euclidean distance to all others; lowest
/// index on ties.
pub fn select_root(graph: &MedialGraph) -> usize {
    let mut best = 0;
    let mut best_cost = f64::INFINITY;
    for (i, p) in graph.points.iter().enumerate() {
        let cost: f64 = graph.points.iter().map(|q| geometry::norm(geometry::sub(*p, *q))).sum();
        if cost < best_cost {
            best = i;
            best_cost = cost;
        }
    }
    best
}

/// Result of [`extract_joints`] with the medial node behind each joint.
#[derive(Clone, Debug, PartialEq)]
pub struct JointExtraction {
    pub skeleton: Skeleton,
    pub medial_index: Vec<usize>,
    /// every node of the graph the joints were placed on
    pub medial_points: Vec<Vec3<f64>>,
}

/// Breadth-first joint placement. A node becomes a joint once its edge
/// distance from the preceding joint on its BFS path exceeds `bone_length`;
/// BFS leaves that no neighbor extends further become end effectors.
pub fn extract_joints(graph: &MedialGraph, root: usize, bone_length: usize) -> Result<JointExtraction> {
    if root >= graph.len() {
        return Err(Error::InvalidArgument(format!(
            "root {root} outside medial graph of {} points",
            graph.len()
        )));
    }
    let n = graph.len();
    let mut depth = vec![usize::MAX; n];
    let mut since = vec![0usize; n];
    let mut last_joint = vec![usize::MAX; n];
    let mut joint_of = vec![None; n];
    let mut has_child = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut medial_index = vec![root];
    let mut parents: Vec<Option<usize>> = vec![None];

    depth[root] = 0;
    last_joint[root] = 0;
    joint_of[root] = Some(0);
    let mut queue = VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &v in &graph.adjacency[u] {
            if depth[v] != usize::MAX {
                continue;
            }
            depth[v] = depth[u] + 1;
            has_child[u] = true;
            since[v] = since[u] + 1;
            last_joint[v] = last_joint[u];
            if since[v] > bone_length {
                // share a joint created at this frontier by an adjacent node
                let twin = graph.adjacency[v].iter().find_map(|&w| {
                    joint_of[w].filter(|&j| parents[j] == Some(last_joint[u]) && depth[w] == depth[v])
                });
                match twin {
                    Some(j) => {
                        last_joint[v] = j;
                        since[v] = 1;
                    }
                    None => {
                        let j = medial_index.len();
                        medial_index.push(v);
                        parents.push(Some(last_joint[u]));
                        joint_of[v] = Some(j);
                        last_joint[v] = j;
                        since[v] = 0;
                    }
                }
            }
            queue.push_back(v);
        }
    }
    for &u in &order {
        if has_child[u] || joint_of[u].is_some() {
            continue;
        }
        if graph.adjacency[u].iter().any(|&w| depth[w] > depth[u]) {
            continue;
        }
        let parent = last_joint[u];
        let dup = graph.adjacency[u]
            .iter()
            .any(|&w| depth[w] == depth[u] && joint_of[w].is_some_and(|j| parents[j] == Some(parent)));
        if dup {
            continue;
        }
        let j = medial_index.len();
        medial_index.push(u);
        parents.push(Some(parent));
        joint_of[u] = Some(j);
    }
    let joints = medial_index.iter().map(|&m| graph.points[m]).collect();
    Ok(JointExtraction {
        skeleton: Skeleton::new(joints, parents, false)?,
        medial_index,
        medial_points: graph.points.clone(),
    })
}

/// Full initialization: medial axis, root, component restriction, joints.
pub fn skeleton_from_volume(clean: &CleanVolume, bone_length: usize) -> Result<JointExtraction> {
    let graph = medial_axis_3d(clean);
    if graph.is_empty() {
        return Err(Error::EmptyScene("medial axis is empty".into()));
    }
    let root = select_root(&graph);
    let (graph, root) = graph.component_of(root);
    extract_joints(&graph, root, bone_length)
}

/// Per-joint motion summary over a set of poses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticityReport {
    pub threshold_deg: f64,
    pub is_static: Vec<bool>,
    pub max_deviation_deg: Vec<f64>,
    /// moving sibling bones whose relative rotation stays under the
    /// threshold; `(lower bone, higher bone)`
    pub similar_siblings: Vec<(usize, usize)>,
}

fn exceeds_often(angles_deg: impl Iterator<Item = f64>, threshold: f64, frames: usize) -> bool {
    let count = angles_deg.filter(|&a| a > threshold).count();
    count as f64 > MOVING_FRACTION * frames as f64
}

/// Flags joints whose local rotation exceeds `threshold_deg` in strictly
/// more than 5% of the poses as moving.
pub fn detect_static_joints(skeleton: &Skeleton, poses: &[Pose], threshold_deg: f64) -> Result<StaticityReport> {
    if poses.is_empty() {
        return Err(Error::InvalidArgument("staticity needs at least one pose".into()));
    }
    for p in poses {
        p.check_arity(skeleton.num_bones())?;
    }
    let frames = poses.len();
    let nj = skeleton.num_joints();
    let mut is_static = vec![true; nj];
    let mut max_dev = vec![0.0f64; nj];
    let rot = |p: &Pose, b: usize| rodrigues(p.bones[b].axis, p.bones[b].angle);
    for j in 0..nj {
        let angles: Vec<f64> = match skeleton.bone_of_joint(j) {
            Some(b) => poses.iter().map(|p| rotation_angle(&rot(p, b)).to_degrees()).collect(),
            None => poses
                .iter()
                .map(|p| rotation_angle(&rodrigues(p.root.axis, p.root.angle)).to_degrees())
                .collect(),
        };
        max_dev[j] = angles.iter().copied().fold(0.0, f64::max);
        is_static[j] = !exceeds_often(angles.into_iter(), threshold_deg, frames);
    }
    let mut similar = Vec::new();
    let bones = skeleton.bones();
    for a in 0..bones.len() {
        for b in a + 1..bones.len() {
            if bones[a].0 != bones[b].0 || is_static[bones[a].1] || is_static[bones[b].1] {
                continue;
            }
            let rel = poses
                .iter()
                .map(|p| rotation_angle(&mat_mul(&rot(p, a), &transpose(&rot(p, b)))).to_degrees());
            if !exceeds_often(rel, threshold_deg, frames) {
                similar.push((a, b));
            }
        }
    }
    Ok(StaticityReport {
        threshold_deg,
        is_static,
        max_deviation_deg: max_dev,
        similar_siblings: similar,
    })
}

/// Outcome of [`simplify`].
#[derive(Clone, Debug, PartialEq)]
pub struct Simplified {
    pub skeleton: Skeleton,
    /// merged normalized weights `[N, new columns]`
    pub weights: Tensor<f64>,
    /// old weight column → new weight column
    pub column_map: Vec<usize>,
    /// old joint → new joint, `None` if removed
    pub joint_map: Vec<Option<usize>>,
    /// new bone → old bone providing its pose, `None` for a retained static
    /// pivot that stays at rest
    pub pose_source: Vec<Option<usize>>,
}

impl Simplified {
    /// Pose on the simplified skeleton.
    pub fn remap_pose(&self, pose: &Pose) -> Pose {
        Pose {
            bones: self
                .pose_source
                .iter()
                .map(|s| match s {
                    Some(b) => pose.bones[*b],
                    None => Default::default(),
                })
                .collect(),
            root: pose.root,
        }
    }

    /// Report expressed on the simplified skeleton.
    pub fn remap_report(&self, report: &StaticityReport, old: &Skeleton) -> StaticityReport {
        let nj = self.skeleton.num_joints();
        let mut is_static = vec![true; nj];
        let mut max_dev = vec![0.0; nj];
        for (o, n) in self.joint_map.iter().enumerate() {
            if let Some(n) = *n {
                is_static[n] = report.is_static[o];
                max_dev[n] = report.max_deviation_deg[o];
            }
        }
        let bone_map = |ob: usize| {
            self.joint_map[old.bone_child(ob)].and_then(|nj| self.skeleton.bone_of_joint(nj))
        };
        let similar = report
            .similar_siblings
            .iter()
            .filter_map(|&(a, b)| Some((bone_map(a)?, bone_map(b)?)))
            .collect();
        StaticityReport {
            threshold_deg: report.threshold_deg,
            is_static,
            max_deviation_deg: max_dev,
            similar_siblings: similar,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Target {
    Root,
    Bone(usize),
}

/// Prunes and merges bones given a staticity report.
///
/// Static bones hand their weight to the parent bone (or the root column
/// when the parent is the root); similar moving siblings merge into the
/// lower-indexed one. Static joints are kept only as pivots of moving
/// children. `weights` are normalized `[N, weight_columns]`.
pub fn simplify(skeleton: &Skeleton, weights: &Tensor<f64>, report: &StaticityReport) -> Result<Simplified> {
    let nj = skeleton.num_joints();
    let nb = skeleton.num_bones();
    let cols = skeleton.weight_columns();
    if report.is_static.len() != nj {
        return Err(Error::InvalidArgument(format!(
            "staticity report covers {} joints, skeleton has {nj}",
            report.is_static.len()
        )));
    }
    if weights.rank() != 2 || weights.shape()[1] != cols {
        return Err(Error::InvalidArgument(format!(
            "weights shape {:?} does not match {cols} columns",
            weights.shape()
        )));
    }
    let bones = skeleton.bones();
    let moving = |j: usize| !report.is_static[j];

    let mut sibling_into: Vec<Option<usize>> = vec![None; nb];
    for &(a, b) in &report.similar_siblings {
        if a >= nb || b >= nb {
            return Err(Error::InvalidArgument(format!("sibling pair ({a}, {b}) out of range")));
        }
        let (lo, hi) = (a.min(b), a.max(b));
        if bones[lo].0 == bones[hi].0 && moving(bones[lo].1) && moving(bones[hi].1) {
            sibling_into[hi] = Some(sibling_into[hi].map_or(lo, |x: usize| x.min(lo)));
        }
    }

    fn resolve(b: usize, sk: &Skeleton, st: &[bool], sib: &[Option<usize>], memo: &mut [Option<Target>]) -> Target {
        if let Some(t) = memo[b] {
            return t;
        }
        let child = sk.bone_child(b);
        let t = if st[child] {
            let parent = sk.parents()[child].expect("bone has parent");
            match sk.bone_of_joint(parent) {
                None => Target::Root,
                Some(pb) => resolve(pb, sk, st, sib, memo),
            }
        } else if let Some(s) = sib[b] {
            resolve(s, sk, st, sib, memo)
        } else {
            Target::Bone(b)
        };
        memo[b] = Some(t);
        t
    }
    let mut memo = vec![None; nb];
    let targets: Vec<Target> = (0..nb)
        .map(|b| resolve(b, skeleton, &report.is_static, &sibling_into, &mut memo))
        .collect();

    // bottom-up retention
    let order = skeleton.topo_order();
    let mut retained = vec![false; nj];
    let mut retained_below = vec![false; nj];
    for &j in order.iter().rev() {
        let kids = skeleton.children(j);
        let moving_child = kids.iter().any(|&c| moving(c));
        let below = kids.iter().any(|&c| retained[c] || retained_below[c]);
        retained_below[j] = below;
        let merged = skeleton.bone_of_joint(j).is_some_and(|b| sibling_into[b].is_some());
        retained[j] = j == skeleton.root() || moving_child || (moving(j) && (!merged || below));
    }

    let mut joint_map = vec![None; nj];
    let mut new_joints = Vec::new();
    for j in 0..nj {
        if retained[j] {
            joint_map[j] = Some(new_joints.len());
            new_joints.push(j);
        }
    }
    let new_parents: Vec<Option<usize>> = new_joints
        .iter()
        .map(|&j| {
            let mut cur = skeleton.parents()[j];
            while let Some(p) = cur {
                if retained[p] {
                    return joint_map[p];
                }
                cur = skeleton.parents()[p];
            }
            None
        })
        .collect();
    let any_root_target = targets.contains(&Target::Root);
    let new_skel = Skeleton::new(
        new_joints.iter().map(|&j| skeleton.joints()[j]).collect(),
        new_parents,
        skeleton.has_root_column() || any_root_target,
    )?;

    let new_bone_of_old = |b: usize| -> usize {
        let nj = joint_map[skeleton.bone_child(b)].expect("target bones are retained");
        new_skel.bone_of_joint(nj).expect("retained non-root joint owns a bone")
    };
    let new_cols = new_skel.weight_columns();
    let mut column_map = Vec::with_capacity(cols);
    for t in &targets {
        column_map.push(match *t {
            Target::Root => new_skel.root_column().expect("root column exists"),
            Target::Bone(b) => new_bone_of_old(b),
        });
    }
    if let Some(rc) = skeleton.root_column() {
        debug_assert_eq!(rc, column_map.len());
        column_map.push(new_skel.root_column().expect("root column kept"));
    }

    let n = weights.shape()[0];
    let mut out = vec![0.0; n * new_cols];
    for i in 0..n {
        let src = weights.row(i);
        let dst = &mut out[i * new_cols..(i + 1) * new_cols];
        for (c, &w) in src.iter().enumerate() {
            dst[column_map[c]] += w;
        }
    }

    let pose_source = (0..new_skel.num_bones())
        .map(|nb| {
            let old_joint = new_joints[new_skel.bone_child(nb)];
            if moving(old_joint) {
                skeleton.bone_of_joint(old_joint)
            } else {
                None
            }
        })
        .collect();

    Ok(Simplified {
        skeleton: new_skel,
        weights: Tensor::new(&[n, new_cols], out)?,
        column_map,
        joint_map,
        pose_source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{BonePose, RootMotion};

    fn chain_graph(edges: usize) -> MedialGraph {
        let voxels: Vec<[usize; 3]> = (0..=edges).map(|i| [i, 0, 0]).collect();
        let dims = [edges + 1, 1, 1];
        MedialGraph::from_voxels(voxels, dims, &Aabb::new([0.0; 3], [(edges + 1) as f64, 1.0, 1.0]))
    }

    #[test]
    fn skeleton_json_round_trip() {
        let s = Skeleton::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![None, Some(0), Some(1)], false)
            .unwrap();
        let js = serde_json::to_string(&s).unwrap();
        assert!(js.contains("\"bones\":[[0,1],[1,2]]"));
        let back: Skeleton = serde_json::from_str(&js).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_cycles_and_multiple_roots() {
        assert!(Skeleton::new(vec![[0.0; 3]; 3], vec![None, Some(2), Some(1)], false).is_err());
        assert!(Skeleton::new(vec![[0.0; 3]; 2], vec![None, None], false).is_err());
        assert!(Skeleton::new(vec![[0.0; 3]; 2], vec![None, Some(5)], false).is_err());
    }

    #[test]
    fn select_root_middle_of_three() {
        let g = chain_graph(2);
        assert_eq!(select_root(&g), 1);
        let single = chain_graph(0);
        assert_eq!(select_root(&single), 0);
    }

    #[test]
    fn chain_joints() {
        let g = chain_graph(25);
        let ex = extract_joints(&g, 0, 10).unwrap();
        assert_eq!(ex.medial_index, vec![0, 11, 22, 25]);
        assert_eq!(ex.skeleton.parents(), &[None, Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn short_graph_is_root_only() {
        let g = chain_graph(6);
        let ex = extract_joints(&g, 3, 10).unwrap();
        // the two chain ends are BFS leaves
        assert_eq!(ex.medial_index[0], 3);
        let g = chain_graph(0);
        let ex = extract_joints(&g, 0, 10).unwrap();
        assert_eq!(ex.skeleton.num_bones(), 0);
        assert_eq!(ex.skeleton.weight_columns(), 1);
    }

    #[test]
    fn single_voxel_thins_to_itself() {
        let mut v = BinaryVolume::new([3, 3, 3]);
        v.set(1, 1, 1, true);
        assert_eq!(thin(&v), v);
    }

    fn pose(b: usize, angles: &[f64]) -> Pose {
        Pose {
            bones: (0..b)
                .map(|i| BonePose {
                    axis: [0.0, 0.0, 1.0],
                    angle: angles.get(i).copied().unwrap_or(0.0),
                })
                .collect(),
            root: RootMotion::default(),
        }
    }

    #[test]
    fn staticity_counts_strictly() {
        let s = Skeleton::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![None, Some(0), Some(1)], false)
            .unwrap();
        let zero: Vec<Pose> = (0..20).map(|_| pose(2, &[])).collect();
        let r = detect_static_joints(&s, &zero, 20.0).unwrap();
        assert!(r.is_static.iter().all(|&x| x));

        // 1 of 20 frames = exactly 5%
        let mut one: Vec<Pose> = zero.clone();
        one[3] = pose(2, &[0.0, 30f64.to_radians()]);
        let r = detect_static_joints(&s, &one, 20.0).unwrap();
        assert!(r.is_static[2]);
        one[4] = pose(2, &[0.0, -30f64.to_radians()]);
        let r = detect_static_joints(&s, &one, 20.0).unwrap();
        assert!(!r.is_static[2] && r.is_static[1]);
        assert!((r.max_deviation_deg[2] - 30.0).abs() < 1e-9);
    }
}
