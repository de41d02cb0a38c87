//! Radix-2 Cooley-Tukey FFT over rank-2 complex tensors.
//!
//! Convention: the forward transform is unnormalized, the inverse carries
//! the full 1/(H*W) factor, so `ifft2(fft2(x)) == x` up to rounding.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Dtype, Tensor};

/// In-place iterative radix-2 transform of one line. Twiddles are
/// accumulated in f64 regardless of `T` so that long lines do not drift.
fn fft1d<T: Scalar>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    if n < 2 {
        return;
    }

    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }

    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * std::f64::consts::TAU / len as f64;
        let wlen = Complex::new(ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut w = Complex::new(1.0f64, 0.0);
            for k in 0..len / 2 {
                let tw = Complex::new(T::cast(w.re), T::cast(w.im));
                let u = buf[start + k];
                let v = buf[start + k + len / 2] * tw;
                buf[start + k] = u + v;
                buf[start + k + len / 2] = u - v;
                w *= wlen;
            }
        }
        len <<= 1;
    }
}

fn check_2d_pow2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.dtype() != Dtype::Complex {
        return Err(Error::Dtype(format!("{what} needs a complex tensor")));
    }
    if t.rank() != 2 {
        return Err(Error::Dimension(format!(
            "{what} needs a rank-2 tensor, got rank {}",
            t.rank()
        )));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::Dimension(format!(
            "{what} needs power-of-two extents, got {h}x{w}"
        )));
    }
    Ok((h, w))
}

fn transform2<T: Scalar>(t: &Tensor<T>, inverse: bool, what: &str) -> Result<Tensor<T>> {
    let (h, w) = check_2d_pow2(t, what)?;
    let mut grid = t.to_complex_vec()?;

    for row in grid.chunks_exact_mut(w) {
        fft1d(row, inverse);
    }

    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        fft1d(&mut col, inverse);
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }

    if inverse {
        let norm = T::cast(1.0 / (h * w) as f64);
        for z in &mut grid {
            *z = Complex::new(z.re * norm, z.im * norm);
        }
    }

    Tensor::from_complex(t.shape(), &grid)
}

/// Unnormalized 2-D forward transform.
pub fn fft2<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    transform2(t, false, "fft2")
}

/// 2-D inverse transform carrying the 1/(H*W) factor.
pub fn ifft2<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    transform2(t, true, "ifft2")
}
