//! Two-dimensional FFT helpers on an `N x N` periodic grid.
//!
//! Layout is x-major: sample `(i, j)` (x index `i`, y index `j`) lives at `i * N + j`, and
//! Fourier mode `(modes[i], modes[j])` uses the same flat index.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Real;

/// Integer wavenumbers in FFT order: `0, 1, .., N/2 - 1, -N/2, .., -1`.
pub fn modes(n: usize) -> Vec<i32> {
    let h = (n / 2) as i32;
    (0..n as i32).map(|i| if i < h { i } else { i - n as i32 }).collect()
}

/// Reduces an integer wavenumber difference to an FFT-order index.
#[inline]
pub fn wrap_index(q: i32, n: usize) -> usize {
    q.rem_euclid(n as i32) as usize
}

pub struct Fft2<T: Real> {
    n: usize,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Real> Fft2<T> {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { n, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn apply(&self, plan: &Arc<dyn Fft<T>>, data: &mut [Complex<T>]) {
        let n = self.n;
        assert_eq!(data.len(), n * n);
        // y direction: contiguous rows
        plan.process(data);
        // x direction: gather columns
        let mut col = vec![Complex::new(T::zero(), T::zero()); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = data[i * n + j];
            }
            plan.process(&mut col);
            for i in 0..n {
                data[i * n + j] = col[i];
            }
        }
    }

    /// Unnormalized forward transform, `F[k] = sum_j f[j] exp(-2 pi i k.j / N)`.
    pub fn forward(&self, data: &mut [Complex<T>]) {
        self.apply(&self.fwd, data);
    }

    /// Unnormalized inverse transform.
    pub fn inverse(&self, data: &mut [Complex<T>]) {
        self.apply(&self.inv, data);
    }

    /// Fourier coefficients `c[k] = N^-2 sum_j f[j] exp(-2 pi i k.j / N)` of real samples.
    pub fn coefficients(&self, samples: &[T]) -> Vec<Complex<T>> {
        let mut data: Vec<Complex<T>> = samples.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.forward(&mut data);
        let s = T::one() / T::from_usize(self.n * self.n).unwrap();
        data.iter_mut().for_each(|c| *c = *c * s);
        data
    }

    /// Grid samples `f[j] = sum_k c[k] exp(2 pi i k.j / N)` from coefficients.
    pub fn synthesize(&self, coeffs: &[Complex<T>]) -> Vec<Complex<T>> {
        let mut data = coeffs.to_vec();
        self.inverse(&mut data);
        data
    }
}
