//! Two-dimensional complex FFT over row-major `H x W` buffers.

use crate::real::Real;
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Unnormalized forward transform and `1/(HW)`-normalized inverse.
pub struct Fft2<T: Real> {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> Fft2<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    pub fn forward(&self, buf: &mut [Complex<T>]) {
        self.apply(buf, false);
    }

    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        self.apply(buf, true);
        let s = T::one() / T::from_usize(self.h * self.w).unwrap();
        for v in buf.iter_mut() {
            *v = *v * s;
        }
    }

    pub fn forward_real(&self, data: &[T]) -> Vec<Complex<T>> {
        let mut buf: Vec<Complex<T>> = data.iter().map(|&x| Complex::new(x, T::zero())).collect();
        self.forward(&mut buf);
        buf
    }

    /// Inverse transform keeping the real part.
    pub fn inverse_real(&self, mut buf: Vec<Complex<T>>) -> Vec<T> {
        self.inverse(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }

    fn apply(&self, buf: &mut [Complex<T>], inverse: bool) {
        assert_eq!(buf.len(), self.h * self.w);
        let (row, col) = if inverse { (&self.row_inv, &self.col_inv) } else { (&self.row_fwd, &self.col_fwd) };
        for r in buf.chunks_mut(self.w) {
            row.process(r);
        }
        let mut tmp = vec![Complex::new(T::zero(), T::zero()); self.h];
        for j in 0..self.w {
            for i in 0..self.h {
                tmp[i] = buf[i * self.w + j];
            }
            col.process(&mut tmp);
            for i in 0..self.h {
                buf[i * self.w + j] = tmp[i];
            }
        }
    }
}

/// Signed frequency index for FFT bin `k` of length `n`.
pub fn signed_index(k: usize, n: usize) -> i64 {
    if k < n.div_ceil(2) { k as i64 } else { k as i64 - n as i64 }
}
