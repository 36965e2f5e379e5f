//! Small complex 3x3 helpers for per-mode algebra.

use crate::real::Real;
use num_complex::Complex;

pub type C<T> = Complex<T>;
pub type Mat3<T> = [[Complex<T>; 3]; 3];
pub type Vec3<T> = [Complex<T>; 3];

pub fn zero3<T: Real>() -> Mat3<T> {
    [[Complex::new(T::zero(), T::zero()); 3]; 3]
}

pub fn eye3<T: Real>() -> Mat3<T> {
    let mut m = zero3();
    for (k, row) in m.iter_mut().enumerate() {
        row[k] = Complex::new(T::one(), T::zero());
    }
    m
}

pub fn mul3<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut m = zero3();
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    m
}

pub fn matvec3<T: Real>(a: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// Conjugate transpose.
pub fn adjoint3<T: Real>(a: &Mat3<T>) -> Mat3<T> {
    let mut m = zero3();
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = a[c][r].conj();
        }
    }
    m
}

pub fn det3<T: Real>(a: &Mat3<T>) -> Complex<T> {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn trace3<T: Real>(a: &Mat3<T>) -> Complex<T> {
    a[0][0] + a[1][1] + a[2][2]
}

/// Inverse by the adjugate; `None` when the determinant vanishes.
pub fn inv3<T: Real>(a: &Mat3<T>) -> Option<Mat3<T>> {
    let d = det3(a);
    if d.norm() == T::zero() || !d.norm().is_finite() {
        return None;
    }
    let mut m = zero3();
    for r in 0..3 {
        for c in 0..3 {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            m[r][c] = (a[r1][c1] * a[r2][c2] - a[r1][c2] * a[r2][c1]) / d;
        }
    }
    Some(m)
}

pub fn max_abs_diff3<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> T {
    let mut m = T::zero();
    for r in 0..3 {
        for c in 0..3 {
            m = m.max((a[r][c] - b[r][c]).norm());
        }
    }
    m
}

pub fn norm3<T: Real>(v: &Vec3<T>) -> T {
    (v[0].norm_sqr() + v[1].norm_sqr() + v[2].norm_sqr()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_known_matrix() {
        let c = |re: f64, im: f64| Complex::new(re, im);
        let a: Mat3<f64> = [
            [c(2.0, 1.0), c(0.0, -1.0), c(1.0, 0.0)],
            [c(0.5, 0.0), c(3.0, 0.0), c(0.0, 2.0)],
            [c(-1.0, 0.0), c(1.0, 1.0), c(4.0, 0.0)],
        ];
        let ai = inv3(&a).unwrap();
        assert!(max_abs_diff3(&mul3(&a, &ai), &eye3()) < 1e-14);
        assert!(max_abs_diff3(&mul3(&ai, &a), &eye3()) < 1e-14);
    }

    #[test]
    fn singular_has_no_inverse() {
        assert!(inv3::<f64>(&zero3()).is_none());
    }
}
