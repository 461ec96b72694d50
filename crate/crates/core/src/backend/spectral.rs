//! Circulant operators applied through the 2-D discrete Fourier transform.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Squared integer frequency magnitude `|k|²` on an `h × w` grid, with
/// frequencies wrapped to `[-n/2, n/2]`.
pub(crate) fn frequency_norm_sq(h: usize, w: usize) -> Array2<f64> {
    let wrap = |k: usize, n: usize| -> f64 {
        let k = k as f64;
        let n = n as f64;
        if k <= n / 2.0 {
            k
        } else {
            k - n
        }
    };
    Array2::from_shape_fn((h, w), |(ky, kx)| {
        let fy = wrap(ky, h);
        let fx = wrap(kx, w);
        fy * fy + fx * fx
    })
}

/// Forward/inverse plans for one grid size.
pub(crate) struct SpectralPlan {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl SpectralPlan {
    pub(crate) fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    fn transpose(buf: &[Complex<f64>], out: &mut [Complex<f64>], rows: usize, cols: usize) {
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = buf[r * cols + c];
            }
        }
    }

    /// Applies the real, symmetric spectral multiplier `mult` (indexed by
    /// frequency `(ky, kx)`) to a real plane and returns the real result.
    pub(crate) fn apply(&self, plane: ArrayView2<f64>, mult: &Array2<f64>) -> Array2<f64> {
        let (h, w) = (self.h, self.w);
        debug_assert_eq!(plane.dim(), (h, w));
        debug_assert_eq!(mult.dim(), (h, w));
        let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.row_fwd.process(&mut buf);
        // columns as rows of the transpose: index kx * h + ky
        let mut t = vec![Complex::new(0.0, 0.0); buf.len()];
        Self::transpose(&buf, &mut t, h, w);
        self.col_fwd.process(&mut t);
        for kx in 0..w {
            for ky in 0..h {
                t[kx * h + ky] *= mult[[ky, kx]];
            }
        }
        self.col_inv.process(&mut t);
        Self::transpose(&t, &mut buf, w, h);
        self.row_inv.process(&mut buf);
        let norm = (h * w) as f64;
        Array2::from_shape_fn((h, w), |(y, x)| buf[y * w + x].re / norm)
    }
}
