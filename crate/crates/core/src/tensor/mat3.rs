//! Fixed-size 3-vector and 3x3 matrix helpers.

use crate::scalar::Real;

pub type Vec3<T> = [T; 3];
/// Row-major 3x3 matrix.
pub type Mat3<T> = [[T; 3]; 3];

#[inline]
pub fn add<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm_sq<T: Real>(a: Vec3<T>) -> T {
    dot(a, a)
}

#[inline]
pub fn norm<T: Real>(a: Vec3<T>) -> T {
    norm_sq(a).sqrt()
}

#[inline]
pub fn dist<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    norm(sub(a, b))
}

#[inline]
pub fn dist_sq<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    norm_sq(sub(a, b))
}

/// Angle between two vectors in `[0, pi]`; zero if either vector has zero length.
pub fn angle_between<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    let c = norm(cross(a, b));
    let d = dot(a, b);
    if c == T::zero() && d == T::zero() {
        return T::zero();
    }
    c.atan2(d)
}

pub fn identity<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn zeros<T: Real>() -> Mat3<T> {
    [[T::zero(); 3]; 3]
}

pub fn diag<T: Real>(d: Vec3<T>) -> Mat3<T> {
    let z = T::zero();
    [[d[0], z, z], [z, d[1], z], [z, z, d[2]]]
}

pub fn transpose<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    let mut t = zeros();
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j][i] = v;
        }
    }
    t
}

pub fn mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut c = zeros();
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

#[inline]
pub fn mul_vec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn det<T: Real>(m: &Mat3<T>) -> T {
    dot(m[0], cross(m[1], m[2]))
}

pub fn trace<T: Real>(m: &Mat3<T>) -> T {
    m[0][0] + m[1][1] + m[2][2]
}

pub fn column<T: Real>(m: &Mat3<T>, j: usize) -> Vec3<T> {
    [m[0][j], m[1][j], m[2][j]]
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> T {
    let mut m = T::zero();
    for i in 0..3 {
        for j in 0..3 {
            m = m.max((a[i][j] - b[i][j]).abs());
        }
    }
    m
}

/// Rotation of `angle` radians about `axis` (Rodrigues). The axis need not be unit length.
pub fn axis_angle<T: Real>(axis: Vec3<T>, angle: T) -> Mat3<T> {
    let n = norm(axis);
    if n == T::zero() {
        return identity();
    }
    let [x, y, z] = scale(axis, T::one() / n);
    let (s, c) = angle.sin_cos();
    let t = T::one() - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn from_quaternion<T: Real>(q: [T; 4]) -> Mat3<T> {
    let [w, x, y, z] = q;
    let two = T::lit(2.0);
    let o = T::one();
    [
        [o - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), o - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), o - two * (x * x + y * y)],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_turn_about_z() {
        let r = axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let v = mul_vec(&r, [1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15 && v[2].abs() < 1e-15);
    }

    #[test]
    fn angle_of_zero_vector_is_zero() {
        assert_eq!(angle_between([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]), 0.0);
        let a = angle_between([1.0, 0.0, 0.0], [0.0, 2.0, 0.0]);
        assert!((a - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn quaternion_matches_axis_angle() {
        let half = 0.3f64;
        let axis = [1.0 / 3f64.sqrt(); 3];
        let q = [half.cos(), axis[0] * half.sin(), axis[1] * half.sin(), axis[2] * half.sin()];
        let a = from_quaternion(q);
        let b = axis_angle(axis, 2.0 * half);
        assert!(max_abs_diff(&a, &b) < 1e-14);
    }
}
