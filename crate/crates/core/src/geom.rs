//! Small fixed-size vector/matrix helpers. Hot paths work on `[T; 3]`
//! directly; anything needing real linear algebra (SVD, eigen) goes through
//! nalgebra in the evaluator instead.

use crate::real::Real;

pub type V3<T> = [T; 3];
/// Row-major 3x3.
pub type M3<T> = [[T; 3]; 3];

#[inline]
pub fn add3<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3<T: Real>(a: V3<T>, s: T) -> V3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3<T: Real>(a: V3<T>, b: V3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3<T: Real>(a: V3<T>) -> T {
    dot3(a, a).sqrt()
}

#[inline]
pub fn normalize3<T: Real>(a: V3<T>) -> V3<T> {
    let n = norm3(a);
    scale3(a, T::one() / n)
}

#[inline]
pub fn mat3_mul_v3<T: Real>(m: &M3<T>, v: V3<T>) -> V3<T> {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

/// `m^T * v` without materializing the transpose.
#[inline]
pub fn mat3_tmul_v3<T: Real>(m: &M3<T>, v: V3<T>) -> V3<T> {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

#[inline]
pub fn mat3_mul<T: Real>(a: &M3<T>, b: &M3<T>) -> M3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb<T> {
    pub min: V3<T>,
    pub max: V3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn new(min: V3<T>, max: V3<T>) -> Self {
        Self { min, max }
    }

    /// Smallest box containing all points; panics on an empty iterator.
    pub fn from_points(points: impl IntoIterator<Item = V3<T>>) -> Self {
        let mut it = points.into_iter();
        let first = it.next().expect("Aabb::from_points: empty");
        let mut b = Self::new(first, first);
        for p in it {
            for a in 0..3 {
                b.min[a] = b.min[a].min(p[a]);
                b.max[a] = b.max[a].max(p[a]);
            }
        }
        b
    }

    pub fn inflate(&self, margin: T) -> Self {
        let m = [margin, margin, margin];
        Self::new(sub3(self.min, m), add3(self.max, m))
    }

    pub fn contains(&self, p: V3<T>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn extent(&self) -> V3<T> {
        sub3(self.max, self.min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_is_orthogonal() {
        let a = [1.0f64, 2.0, 3.0];
        let b = [-0.5, 4.0, 0.25];
        let c = cross3(a, b);
        assert!(dot3(a, c).abs() < 1e-12);
        assert!(dot3(b, c).abs() < 1e-12);
    }

    #[test]
    fn tmul_matches_transpose() {
        let m = [[1.0f64, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 10.0]];
        let v = [0.3, -0.7, 1.1];
        let got = mat3_tmul_v3(&m, v);
        let want = [
            m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
        ];
        for a in 0..3 {
            assert!((got[a] - want[a]).abs() < 1e-15);
        }
    }

    #[test]
    fn aabb_from_points_and_contains() {
        let b = Aabb::from_points([[0.0f64, 1.0, -1.0], [2.0, -3.0, 0.5]]);
        assert_eq!(b.min, [0.0, -3.0, -1.0]);
        assert_eq!(b.max, [2.0, 1.0, 0.5]);
        assert!(b.contains([1.0, 0.0, 0.0]));
        assert!(!b.contains([1.0, 0.0, 0.6]));
        let b2 = b.inflate(0.5);
        assert_eq!(b2.min, [-0.5, -3.5, -1.5]);
        assert!(b2.contains([1.0, 0.0, 0.6]));
    }
}
