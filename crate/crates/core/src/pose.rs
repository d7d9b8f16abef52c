//! Camera poses: unit quaternion (w, x, y, z) + translation, camera-to-world.
//!
//! The quaternion-to-rotation map uses the polynomial form (no division by
//! |q|), so it stays differentiable off the unit sphere; optimization keeps
//! quaternions near the sphere by re-normalizing after every step.

use crate::geom::{add3, mat3_mul_v3, mat3_tmul_v3, sub3, M3, V3};
use crate::real::Real;

/// Rigid camera-to-world transform: `p_world = R(q) * p_cam + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T> {
    /// Unit quaternion, scalar first: (w, x, y, z).
    pub q: [T; 4],
    pub t: V3<T>,
}

/// Polynomial quaternion-to-rotation. Exact rotation matrix for unit q;
/// smooth (quadratic) in q everywhere, which is what the autodiff path needs.
pub fn quat_to_rot<T: Real>(q: [T; 4]) -> M3<T> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = T::from_f64(2.0);
    let one = T::one();
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

/// Partial derivatives `dR/dq_k` of the polynomial map, k = w, x, y, z.
pub fn quat_to_rot_deriv<T: Real>(q: [T; 4]) -> [M3<T>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = T::from_f64(2.0);
    let s = |m: M3<T>| -> M3<T> {
        let mut out = m;
        for row in &mut out {
            for v in row {
                *v = *v * two;
            }
        }
        out
    };
    let zero = T::zero();
    [
        s([[zero, -z, y], [z, zero, -x], [-y, x, zero]]),
        s([[zero, y, z], [y, -two * x, -w], [z, w, -two * x]]),
        s([[-two * y, x, w], [x, zero, z], [-w, z, -two * y]]),
        s([[-two * z, -w, x], [w, -two * z, y], [x, y, zero]]),
    ]
}

/// Hamilton product a * b, scalar-first.
pub fn quat_mul<T: Real>(a: [T; 4], b: [T; 4]) -> [T; 4] {
    let (aw, ax, ay, az) = (a[0], a[1], a[2], a[3]);
    let (bw, bx, by, bz) = (b[0], b[1], b[2], b[3]);
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub fn quat_conj<T: Real>(q: [T; 4]) -> [T; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

pub fn quat_norm<T: Real>(q: [T; 4]) -> T {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize<T: Real>(q: [T; 4]) -> [T; 4] {
    let inv = T::one() / quat_norm(q);
    [q[0] * inv, q[1] * inv, q[2] * inv, q[3] * inv]
}

/// Rotation matrix back to a unit quaternion (w >= 0 representative).
pub fn rot_to_quat<T: Real>(m: &M3<T>) -> [T; 4] {
    let na = nalgebra::Matrix3::new(
        m[0][0].to_f64(),
        m[0][1].to_f64(),
        m[0][2].to_f64(),
        m[1][0].to_f64(),
        m[1][1].to_f64(),
        m[1][2].to_f64(),
        m[2][0].to_f64(),
        m[2][1].to_f64(),
        m[2][2].to_f64(),
    );
    let q =
        nalgebra::UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(
            na,
        ));
    let (w, x, y, z) = if q.w < 0.0 {
        (-q.w, -q.i, -q.j, -q.k)
    } else {
        (q.w, q.i, q.j, q.k)
    };
    [
        T::from_f64(w),
        T::from_f64(x),
        T::from_f64(y),
        T::from_f64(z),
    ]
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self {
            q: [T::one(), T::zero(), T::zero(), T::zero()],
            t: [T::zero(); 3],
        }
    }

    pub fn from_matrix(r: &M3<T>, t: V3<T>) -> Self {
        Self::new(rot_to_quat(r), t)
    }

    pub fn new(q: [T; 4], t: V3<T>) -> Self {
        Self { q, t }
    }

    pub fn rotation(&self) -> M3<T> {
        quat_to_rot(self.q)
    }

    /// q scaled to unit norm (translation untouched).
    pub fn normalized(&self) -> Self {
        Self {
            q: quat_normalize(self.q),
            t: self.t,
        }
    }

    /// Representative with w >= 0; q and -q encode the same rotation, so
    /// comparisons and trajectory output use this form.
    pub fn canonicalized(&self) -> Self {
        if self.q[0] < T::zero() {
            Self {
                q: [-self.q[0], -self.q[1], -self.q[2], -self.q[3]],
                t: self.t,
            }
        } else {
            *self
        }
    }

    /// Camera point to world point.
    pub fn transform(&self, p: V3<T>) -> V3<T> {
        add3(mat3_mul_v3(&self.rotation(), p), self.t)
    }

    /// World point to camera point (assumes unit q).
    pub fn inverse_transform(&self, p: V3<T>) -> V3<T> {
        mat3_tmul_v3(&self.rotation(), sub3(p, self.t))
    }

    /// `self * other` (apply `other` first, then `self`).
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        Pose {
            q: quat_mul(self.q, other.q),
            t: add3(mat3_mul_v3(&self.rotation(), other.t), self.t),
        }
    }

    /// Inverse transform (assumes unit q).
    pub fn inverse(&self) -> Pose<T> {
        let qc = quat_conj(self.q);
        let rt = mat3_tmul_v3(&self.rotation(), self.t);
        Pose {
            q: qc,
            t: [-rt[0], -rt[1], -rt[2]],
        }
    }

    /// Homogeneous 4x4, row-major.
    pub fn matrix(&self) -> [[T; 4]; 4] {
        let r = self.rotation();
        let mut m = [[T::zero(); 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = self.t[i];
        }
        m[3][3] = T::one();
        m
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose {
            q: [
                U::from_f64(self.q[0].to_f64()),
                U::from_f64(self.q[1].to_f64()),
                U::from_f64(self.q[2].to_f64()),
                U::from_f64(self.q[3].to_f64()),
            ],
            t: [
                U::from_f64(self.t[0].to_f64()),
                U::from_f64(self.t[1].to_f64()),
                U::from_f64(self.t[2].to_f64()),
            ],
        }
    }
}

/// Constant-velocity motion model: `T_prev * (T_prev2^-1 * T_prev)`, i.e.
/// replay the last relative motion once more. Result is re-normalized.
pub fn constant_velocity_init<T: Real>(prev2: &Pose<T>, prev: &Pose<T>) -> Pose<T> {
    let delta = prev2.inverse().compose(prev);
    prev.compose(&delta).normalized()
}
