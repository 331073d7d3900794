//! Discrete Fourier transforms used by the parameter-free token mixing layer.
//!
//! `X_k = sum_t x_t exp(-2 pi i t k / N)`. Two routes: direct summation for any
//! length and an iterative radix-2 FFT for power-of-two lengths. [`dft`] picks
//! the FFT when it applies.

use std::f64::consts::PI;

use super::Scalar;

fn twiddle<T: Scalar>(tk: usize, n: usize) -> (T, T) {
    // reduce the phase before the trig call to keep large t*k accurate
    let angle = -2.0 * PI * ((tk % n) as f64) / n as f64;
    (T::lit(angle.cos()), T::lit(angle.sin()))
}

/// O(N^2) direct summation.
pub fn dft_direct<T: Scalar>(re: &[T], im: &[T]) -> (Vec<T>, Vec<T>) {
    let n = re.len();
    assert_eq!(n, im.len());
    let mut out_re = vec![T::zero(); n];
    let mut out_im = vec![T::zero(); n];
    for k in 0..n {
        let (mut sr, mut si) = (T::zero(), T::zero());
        for t in 0..n {
            let (c, s) = twiddle::<T>(t * k, n);
            sr += re[t] * c - im[t] * s;
            si += re[t] * s + im[t] * c;
        }
        out_re[k] = sr;
        out_im[k] = si;
    }
    (out_re, out_im)
}

/// Iterative Cooley-Tukey FFT. Panics unless the length is a power of two.
pub fn fft_radix2<T: Scalar>(re: &[T], im: &[T]) -> (Vec<T>, Vec<T>) {
    let n = re.len();
    assert_eq!(n, im.len());
    assert!(n.is_power_of_two(), "radix-2 FFT needs a power-of-two length, got {n}");
    let mut xr = re.to_vec();
    let mut xi = im.to_vec();
    if n <= 1 {
        return (xr, xi);
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            xr.swap(i, j);
            xi.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for j in 0..half {
                let (c, s) = twiddle::<T>(j, len);
                let (ur, ui) = (xr[start + j], xi[start + j]);
                let (vr0, vi0) = (xr[start + j + half], xi[start + j + half]);
                let vr = vr0 * c - vi0 * s;
                let vi = vr0 * s + vi0 * c;
                xr[start + j] = ur + vr;
                xi[start + j] = ui + vi;
                xr[start + j + half] = ur - vr;
                xi[start + j + half] = ui - vi;
            }
        }
        len *= 2;
    }
    (xr, xi)
}

pub fn dft<T: Scalar>(re: &[T], im: &[T]) -> (Vec<T>, Vec<T>) {
    if re.len().is_power_of_two() {
        fft_radix2(re, im)
    } else {
        dft_direct(re, im)
    }
}

/// `Re(F_hidden(F_seq(X)))` for a row-major `len x d` real matrix.
///
/// The map is linear and self-adjoint (both DFT matrices are symmetric), so the
/// same routine also back-propagates gradients.
pub fn fourier_mix<T: Scalar>(x: &[T], len: usize, d: usize) -> Vec<T> {
    assert_eq!(x.len(), len * d);
    let mut re = vec![T::zero(); len * d];
    let mut im = vec![T::zero(); len * d];
    let zeros = vec![T::zero(); len];
    let mut col = vec![T::zero(); len];
    for j in 0..d {
        for t in 0..len {
            col[t] = x[t * d + j];
        }
        let (cr, ci) = dft(&col, &zeros);
        for t in 0..len {
            re[t * d + j] = cr[t];
            im[t * d + j] = ci[t];
        }
    }
    let mut out = vec![T::zero(); len * d];
    for t in 0..len {
        let (rr, _) = dft(&re[t * d..(t + 1) * d], &im[t * d..(t + 1) * d]);
        out[t * d..(t + 1) * d].copy_from_slice(&rr);
    }
    out
}
