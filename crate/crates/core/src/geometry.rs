//! Small fixed-size linear algebra used outside the tape: rotations, rigid
//! transforms and point/segment distances.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

#[inline]
pub fn add<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Scalar>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm<T: Scalar>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    let d = sub(a, b);
    dot(d, d)
}

pub fn normalize<T: Scalar>(a: Vec3<T>) -> Vec3<T> {
    let n = norm(a);
    if n > T::zero() {
        scale(a, T::one() / n)
    } else {
        a
    }
}

pub fn identity3<T: Scalar>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn mat_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut r = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    r
}

pub fn mat_vec<T: Scalar>(a: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot(a[0], v), dot(a[1], v), dot(a[2], v)]
}

pub fn transpose<T: Scalar>(a: &Mat3<T>) -> Mat3<T> {
    let mut r = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = a[j][i];
        }
    }
    r
}

pub fn det<T: Scalar>(a: &Mat3<T>) -> T {
    dot(a[0], cross(a[1], a[2]))
}

/// Axis-angle rotation. The axis is normalized first; an axis shorter than
/// `1e-12` yields the identity.
pub fn rodrigues<T: Scalar>(axis: Vec3<T>, angle: T) -> Mat3<T> {
    let n = norm(axis);
    let k = if n < T::lit(1e-12) {
        [T::zero(); 3]
    } else {
        scale(axis, T::one() / n)
    };
    let (s, c) = angle.sin_cos();
    let v = T::one() - c;
    let n2 = dot(k, k);
    let [x, y, z] = k;
    [
        [T::one() + v * (x * x - n2), -s * z + v * x * y, s * y + v * x * z],
        [s * z + v * x * y, T::one() + v * (y * y - n2), -s * x + v * y * z],
        [-s * y + v * x * z, s * x + v * y * z, T::one() + v * (z * z - n2)],
    ]
}

/// Rotation angle of an orthonormal matrix in `[0, π]`.
pub fn rotation_angle<T: Scalar>(r: &Mat3<T>) -> T {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let c = ((tr - T::one()) * T::lit(0.5)).max(-T::one()).min(T::one());
    c.acos()
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rigid<T> {
    pub rot: Mat3<T>,
    pub trans: Vec3<T>,
}

impl<T: Scalar> Rigid<T> {
    pub fn identity() -> Self {
        Self {
            rot: identity3(),
            trans: [T::zero(); 3],
        }
    }

    /// Rotation by `rot` about `pivot`.
    pub fn about_pivot(rot: Mat3<T>, pivot: Vec3<T>) -> Self {
        Self {
            trans: sub(pivot, mat_vec(&rot, pivot)),
            rot,
        }
    }

    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        add(mat_vec(&self.rot, p), self.trans)
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Rigid<T>) -> Rigid<T> {
        Rigid {
            rot: mat_mul(&self.rot, &other.rot),
            trans: add(mat_vec(&self.rot, other.trans), self.trans),
        }
    }

    pub fn inverse(&self) -> Rigid<T> {
        let rt = transpose(&self.rot);
        Rigid {
            trans: scale(mat_vec(&rt, self.trans), -T::one()),
            rot: rt,
        }
    }

    /// Row-major 3×4 `[R | t]` flattened as nine rotation entries then
    /// the translation.
    pub fn to_row12(&self) -> [T; 12] {
        let r = &self.rot;
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2], self.trans[0],
            self.trans[1], self.trans[2],
        ]
    }

    pub fn from_row12(v: &[T]) -> Self {
        Self {
            rot: [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]],
            trans: [v[9], v[10], v[11]],
        }
    }
}

/// Euclidean distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance<T: Scalar>(p: Vec3<T>, a: Vec3<T>, b: Vec3<T>) -> T {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > T::zero() {
        (dot(sub(p, a), ab) / len2).max(T::zero()).min(T::one())
    } else {
        T::zero()
    };
    norm(sub(p, add(a, scale(ab, t))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quarter_turn_about_z() {
        let r = rodrigues([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let y = mat_vec(&r, [1.0, 0.0, 0.0]);
        assert!((y[0]).abs() < 1e-15 && (y[1] - 1.0).abs() < 1e-15 && y[2].abs() < 1e-15);
    }

    #[test]
    fn zero_angle_and_zero_axis_are_identity() {
        assert_eq!(rodrigues([0.3, -1.0, 2.0], 0.0f64), identity3::<f64>());
        assert_eq!(rodrigues([0.0, 0.0, 0.0], 1.3f64), identity3::<f64>());
    }

    #[test]
    fn pivot_rotation_half_turn() {
        let r = rodrigues([0.0, 0.0, 1.0], std::f64::consts::PI);
        let t = Rigid::about_pivot(r, [1.0, 0.0, 0.0]);
        let p = t.apply([2.0, 0.0, 0.0]);
        for (a, b) in p.iter().zip([0.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_distance() {
        let a = [0.0, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0];
        assert_eq!(point_segment_distance([0.5, 0.0, 0.0], a, b), 0.0);
        assert!((point_segment_distance::<f64>([0.5, 1.0, 0.0], a, b) - 1.0).abs() < 1e-15);
        assert!((point_segment_distance::<f64>([2.0, 0.0, 0.0], a, b) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn rodrigues_is_orthonormal(ax in prop::array::uniform3(-2.0f64..2.0), th in -6.0f64..6.0) {
            prop_assume!(norm(ax) > 1e-3);
            let r = rodrigues(ax, th);
            let rtr = mat_mul(&transpose(&r), &r);
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((rtr[i][j] - e).abs() < 1e-12);
                }
            }
            prop_assert!((det(&r) - 1.0).abs() < 1e-12);
            let back = mat_mul(&r, &rodrigues(ax, -th));
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((back[i][j] - e).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn rotation_angle_recovers_magnitude(ax in prop::array::uniform3(-2.0f64..2.0), th in 0.01f64..3.1) {
            prop_assume!(norm(ax) > 1e-3);
            let r = rodrigues(ax, th);
            prop_assert!((rotation_angle(&r) - th).abs() < 1e-6);
        }
    }
}
