mod common;

use artipoint::kinematics::{forward_kinematics, lbs_warp, BonePose, Pose};
use artipoint::skeleton::*;
use artipoint::voxel_seed::{binarize_and_clean, rasterize_field, Aabb, BinaryVolume};
use common::*;
use proptest::prelude::*;

#[test]
fn bar_thins_to_centerline() {
    let v = bar();
    let thinned = thin(&v);
    assert!(thinned.count() > 0);
    assert_eq!(thinned.components(true).len(), 1);
    for i in 0..thinned.occ.len() {
        if thinned.occ[i] {
            let [x, y, z] = thinned.coords(i);
            let d = ((x as f64 - 3.0).powi(2) + (y as f64 - 3.0).powi(2)).sqrt();
            assert!(d <= 1.0 + 1e-12, "voxel ({x},{y},{z}) is {d} from the centerline");
            assert!((2..23).contains(&z));
        }
    }
    // a bar should leave a curve spanning most of its length
    let zs: Vec<usize> = (0..thinned.occ.len()).filter(|&i| thinned.occ[i]).map(|i| thinned.coords(i)[2]).collect();
    assert!(zs.iter().max().unwrap() - zs.iter().min().unwrap() >= 15);
}

#[test]
fn torus_keeps_one_loop() {
    let v = torus();
    assert_eq!(euler(&v), 0);
    let t = thin(&v);
    assert!(t.count() < v.count() / 4);
    assert_eq!(t.components(true).len(), 1);
    // one component with no cavities: χ = 1 − loops
    assert_eq!(euler(&t), 0);
    let g = medial_axis_3d(&clean(t));
    assert!(g.edge_count() >= g.len(), "medial graph has no cycle");
}

#[test]
fn thinning_preserves_components() {
    let mut v = BinaryVolume::new([12, 8, 8]);
    for z in 1..4 {
        for y in 1..4 {
            for x in 1..10 {
                v.set(x, y, z, true);
            }
        }
    }
    for z in 5..7 {
        for y in 5..7 {
            for x in 2..6 {
                v.set(x, y, z, true);
            }
        }
    }
    let t = thin(&v);
    assert_eq!(v.components(true).len(), t.components(true).len());
    assert_eq!(euler(&v), euler(&t));
}

#[test]
fn medial_points_lie_in_volume() {
    let cap = |p: [f64; 3]| {
        let x = p[0].clamp(-0.5, 0.5);
        if ((p[0] - x).powi(2) + p[1] * p[1] + p[2] * p[2]).sqrt() <= 0.15 {
            1.0
        } else {
            0.0
        }
    };
    let g = rasterize_field(cap, [32; 3], Aabb::cube(0.8)).unwrap();
    let c = binarize_and_clean(&g, 0.5).unwrap();
    let m = medial_axis_3d(&c);
    for v in &m.voxels {
        assert!(c.volume.occ[c.volume.index(v[0], v[1], v[2])]);
    }
    for (i, adj) in m.adjacency.iter().enumerate() {
        for &j in adj {
            assert!(m.adjacency[j].contains(&i));
        }
    }
    let ex = skeleton_from_volume(&c, DEFAULT_BONE_LENGTH).unwrap();
    assert!(ex.skeleton.num_bones() >= 2);
}

fn graph_from(points: Vec<[usize; 3]>) -> MedialGraph {
    MedialGraph::from_voxels(points, [64, 64, 64], &Aabb::new([0.0; 3], [64.0; 3]))
}

#[test]
fn star_root_is_hub() {
    let mut pts = vec![[30, 30, 30]];
    let arms: [[isize; 3]; 5] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]];
    for a in arms {
        let len = if a[2] == 1 { 3 } else { 6 };
        for k in 1..=len {
            pts.push([(30 + a[0] * k) as usize, (30 + a[1] * k) as usize, (30 + a[2] * k) as usize]);
        }
    }
    let g = graph_from(pts);
    let brute = (0..g.len())
        .min_by(|&a, &b| {
            let s = |i: usize| -> f64 {
                g.points
                    .iter()
                    .map(|q| {
                        let p = g.points[i];
                        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
                    })
                    .sum()
            };
            s(a).partial_cmp(&s(b)).unwrap().then(a.cmp(&b))
        })
        .unwrap();
    assert_eq!(select_root(&g), 0);
    assert_eq!(brute, 0);
}

#[test]
fn y_graph_keeps_branches() {
    // stem of 12 edges then two arms of 14 edges
    let mut pts = Vec::new();
    for k in 0..=12 {
        pts.push([20, 10 + k, 10]);
    }
    for k in 1..=14 {
        pts.push([20 + k, 22 + k, 10]);
        pts.push([20 - k, 22 + k, 10]);
    }
    let g = graph_from(pts);
    let ex = extract_joints(&g, 0, 10).unwrap();
    let s = &ex.skeleton;
    // root, stem joint at 11, one joint per arm at 22, two end effectors
    assert_eq!(ex.medial_index.len(), 6);
    assert_eq!(s.parents()[1], Some(0));
    let arm_joints: Vec<usize> = (2..4).collect();
    for j in arm_joints {
        assert_eq!(s.parents()[j], Some(1));
    }
    assert_eq!(s.children(1).len(), 2);
    assert_eq!(s.topo_order().len(), 6);
}

#[test]
fn fig12_outcome() {
    let s = fig12();
    let w = dyadic_weights(16, s.weight_columns(), 7);
    let out = simplify(&s, &w, &fig12_report()).unwrap();
    let sk = &out.skeleton;
    assert_eq!(out.joint_map, vec![Some(0), None, Some(1), Some(2), Some(3), Some(4), Some(5), None]);
    assert_eq!(sk.parents(), &[None, Some(0), Some(1), Some(1), Some(2), Some(2)]);
    assert_eq!(sk.num_bones(), 5);
    let root_col = sk.root_column().unwrap();
    // bones ending at j1, j2, j3 are 0, 1, 2
    assert_eq!(out.column_map[0], root_col);
    assert_eq!(out.column_map[1], root_col);
    assert_eq!(out.column_map[2], root_col);
    // j7's bone (6) merges into j6's bone (5)
    assert_eq!(out.column_map[6], out.column_map[5]);
    assert_ne!(out.column_map[3], root_col);
    assert_eq!(out.pose_source, vec![None, None, Some(3), Some(4), Some(5)]);
    for i in 0..16 {
        let a: f64 = w.row(i).iter().sum();
        let b: f64 = out.weights.row(i).iter().sum();
        assert_eq!(a, b);
        let r = out.weights.row(i)[root_col];
        assert_eq!(r, w.row(i)[0] + w.row(i)[1] + w.row(i)[2]);
    }
}

#[test]
fn fig12_idempotent() {
    let s = fig12();
    let w = dyadic_weights(16, s.weight_columns(), 9);
    let rep = fig12_report();
    let once = simplify(&s, &w, &rep).unwrap();
    let rep2 = once.remap_report(&rep, &s);
    let twice = simplify(&once.skeleton, &once.weights, &rep2).unwrap();
    assert_eq!(twice.skeleton, once.skeleton);
    assert_eq!(twice.weights, once.weights);
    assert!(twice.skeleton.num_joints() <= once.skeleton.num_joints());
}

#[test]
fn all_static_collapses_to_root() {
    let s = fig12();
    let w = dyadic_weights(10, s.weight_columns(), 3);
    let mut rep = fig12_report();
    rep.is_static = vec![true; 8];
    let out = simplify(&s, &w, &rep).unwrap();
    assert_eq!(out.skeleton.num_joints(), 1);
    assert_eq!(out.skeleton.weight_columns(), 1);
    for i in 0..10 {
        assert_eq!(out.weights.row(i)[0], w.row(i).iter().sum::<f64>());
    }
}

#[test]
fn nothing_static_is_identity() {
    let s = fig12();
    let w = dyadic_weights(10, s.weight_columns(), 4);
    let mut rep = fig12_report();
    rep.is_static = vec![false; 8];
    let out = simplify(&s, &w, &rep).unwrap();
    assert_eq!(out.skeleton, s);
    assert_eq!(out.weights, w);
    assert_eq!(out.column_map, (0..7).collect::<Vec<_>>());
    assert_eq!(out.pose_source, (0..7).map(Some).collect::<Vec<_>>());
}

#[test]
fn similar_siblings_merge() {
    let s = fig12();
    let w = dyadic_weights(8, s.weight_columns(), 5);
    let mut rep = fig12_report();
    rep.similar_siblings = vec![(4, 5)];
    let out = simplify(&s, &w, &rep).unwrap();
    assert_eq!(out.column_map[5], out.column_map[4]);
    // j6 had a static child only, so it goes
    assert_eq!(out.joint_map[6], None);
}

fn fig12_pose(angles: &[f64]) -> Pose {
    let mut p = Pose::identity(7);
    for (b, a) in angles.iter().enumerate() {
        p.bones[b] = BonePose {
            axis: [0.0, 0.0, 1.0],
            angle: *a,
        };
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simplified_warp_stays_close(
        small in prop::collection::vec(-0.3f64..0.3, 7),
        big in prop::collection::vec(-1.0f64..1.0, 3),
        pts in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 1..12),
    ) {
        let tr = 20f64.to_radians();
        let s = fig12();
        // static bones stay under the threshold, moving ones are free
        let mut angles: Vec<f64> = small.iter().map(|a| a * tr / 0.3).collect();
        angles[3] = big[0];
        angles[4] = big[1];
        angles[5] = big[2];
        let pose = fig12_pose(&angles);
        let w = artipoint::kinematics::normalize_weights(
            &artipoint::kinematics::init_weights(&pts, &s), 0.3).unwrap();
        let out = simplify(&s, &w, &fig12_report()).unwrap();
        let before = lbs_warp(&pts, &w, &forward_kinematics(&s, &pose).unwrap().columns()).unwrap();
        let p2 = out.remap_pose(&pose);
        let after = lbs_warp(&pts, &out.weights, &forward_kinematics(&out.skeleton, &p2).unwrap().columns()).unwrap();
        // each dropped rotation is at most t_r and moves a point by at most
        // 2 sin(t_r/2) times its lever arm; chains of three compound
        let reach = 8.0;
        let bound = 4.0 * 2.0 * (tr / 2.0).sin() * reach;
        for (a, b) in before.points.iter().zip(&after.points) {
            let d = ((a[0]-b[0]).powi(2) + (a[1]-b[1]).powi(2) + (a[2]-b[2]).powi(2)).sqrt();
            prop_assert!(d <= bound, "displacement {d} exceeds {bound}");
        }
    }

    #[test]
    fn simplify_conserves_mass(seed in 0u64..1000, mask in prop::collection::vec(any::<bool>(), 8)) {
        let s = fig12();
        let w = dyadic_weights(6, s.weight_columns(), seed);
        let mut rep = fig12_report();
        rep.is_static = mask.clone();
        rep.is_static[0] = false;
        let out = simplify(&s, &w, &rep).unwrap();
        prop_assert!(out.skeleton.num_joints() <= s.num_joints());
        for i in 0..6 {
            prop_assert_eq!(w.row(i).iter().sum::<f64>(), out.weights.row(i).iter().sum::<f64>());
        }
        let rep2 = out.remap_report(&rep, &s);
        let again = simplify(&out.skeleton, &out.weights, &rep2).unwrap();
        prop_assert_eq!(&again.skeleton, &out.skeleton);
        prop_assert_eq!(&again.weights, &out.weights);
    }
}
