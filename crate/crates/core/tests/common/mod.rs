#![allow(dead_code)]

use std::collections::HashSet;

use artipoint::autodiff::Tensor;
use artipoint::skeleton::{Skeleton, StaticityReport};
use artipoint::voxel_seed::{Aabb, BinaryVolume, CleanVolume};

/// Euler characteristic of the union of closed unit cubes.
pub fn euler(vol: &BinaryVolume) -> i64 {
    let mut cells: HashSet<[i64; 3]> = HashSet::new();
    for i in 0..vol.occ.len() {
        if !vol.occ[i] {
            continue;
        }
        let [x, y, z] = vol.coords(i).map(|c| c as i64);
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    cells.insert([2 * x + a, 2 * y + b, 2 * z + c]);
                }
            }
        }
    }
    cells
        .iter()
        .map(|c| {
            let odd = c.iter().filter(|&&v| v % 2 != 0).count();
            if odd % 2 == 0 {
                1
            } else {
                -1
            }
        })
        .sum()
}

/// Wraps a volume with unit voxels at the origin.
pub fn clean(vol: BinaryVolume) -> CleanVolume {
    let d = vol.dims;
    CleanVolume {
        volume: vol,
        bbox: Aabb::new([0.0; 3], [d[0] as f64, d[1] as f64, d[2] as f64]),
    }
}

/// 3×3×21 bar centered on x = y = 3 inside a 7×7×25 volume.
pub fn bar() -> BinaryVolume {
    let mut v = BinaryVolume::new([7, 7, 25]);
    for z in 2..23 {
        for y in 2..5 {
            for x in 2..5 {
                v.set(x, y, z, true);
            }
        }
    }
    v
}

pub fn torus() -> BinaryVolume {
    let n = 24;
    let mut v = BinaryVolume::new([n, n, 9]);
    let (big, small) = (7.0, 2.6);
    for z in 0..9 {
        for y in 0..n {
            for x in 0..n {
                let (px, py, pz) = (x as f64 - 11.5, y as f64 - 11.5, z as f64 - 4.0);
                let q = ((px * px + py * py).sqrt() - big).hypot(pz);
                if q <= small {
                    v.set(x, y, z, true);
                }
            }
        }
    }
    v
}

pub fn fig12() -> Skeleton {
    // j0 root; j1, j2, j3 static chain; j4 moving off j2; j5, j6 moving off
    // j3; j7 static end effector below j6
    let joints = vec![
        [0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 2.0, 0.0],
        [0.0, 3.0, 0.0],
        [1.0, 2.0, 0.0],
        [-1.0, 4.0, 0.0],
        [1.0, 4.0, 0.0],
        [1.0, 5.0, 0.0],
    ];
    let parents = vec![None, Some(0), Some(1), Some(2), Some(2), Some(3), Some(3), Some(6)];
    Skeleton::new(joints, parents, false).unwrap()
}

pub fn fig12_report() -> StaticityReport {
    let is_static = vec![false, true, true, true, false, false, false, true];
    StaticityReport {
        threshold_deg: 20.0,
        max_deviation_deg: is_static.iter().map(|&s| if s { 5.0 } else { 40.0 }).collect(),
        is_static,
        similar_siblings: vec![],
    }
}

/// Dyadic weights so column sums are exact.
pub fn dyadic_weights(n: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    let mut data = Vec::with_capacity(n * cols);
    for _ in 0..n {
        let mut raw: Vec<u64> = (0..cols)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 59) + 1
            })
            .collect();
        let total: u64 = raw.iter().sum();
        let pad = total.next_power_of_two() - total;
        raw[0] += pad;
        let denom = total.next_power_of_two() as f64;
        data.extend(raw.iter().map(|&r| r as f64 / denom));
    }
    Tensor::new(&[n, cols], data).unwrap()
}

