//! Discrete Fourier transforms on `Complex64` buffers.
//!
//! Power-of-two lengths use an iterative radix-2 decimation-in-time FFT;
//! other lengths go through Bluestein's chirp-z reduction to a padded
//! power-of-two convolution, so `dft`/`idft` accept any length. Also exposes
//! the linear convolution / correlation helpers built on top, which is what
//! the signal stages actually call.

use num_complex::Complex64;
use std::f64::consts::PI;

/// Forward DFT, any length: `X[k] = sum_n x[n] exp(-2*pi*i*n*k/N)`.
pub fn dft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    if n <= 1 {
        return x.to_vec();
    }
    if n.is_power_of_two() {
        let mut buf = x.to_vec();
        fft_pow2(&mut buf, false);
        buf
    } else {
        bluestein(x)
    }
}

/// Inverse DFT, any length; `idft(dft(x)) == x` up to roundoff.
pub fn idft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    if n <= 1 {
        return x.to_vec();
    }
    let mut buf: Vec<Complex64> = x.iter().map(|c| c.conj()).collect();
    let out = dft(&buf);
    buf.clear();
    let scale = 1.0 / n as f64;
    out.iter().map(|c| c.conj() * scale).collect()
}

/// In-place radix-2 FFT. `inverse` flips the twiddle sign but does NOT apply
/// the 1/N normalization.
fn fft_pow2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());

    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            buf.swap(i, j);
        }
    }

    // Twiddle table for the full size; stage `m` strides through it.
    let sign = if inverse { 1.0 } else { -1.0 };
    let half_tw: Vec<Complex64> = (0..n / 2)
        .map(|j| Complex64::from_polar(1.0, sign * 2.0 * PI * j as f64 / n as f64))
        .collect();

    let mut m = 2;
    while m <= n {
        let half = m / 2;
        let step = n / m;
        for start in (0..n).step_by(m) {
            for j in 0..half {
                let w = half_tw[j * step];
                let a = buf[start + j];
                let b = buf[start + j + half] * w;
                buf[start + j] = a + b;
                buf[start + j + half] = a - b;
            }
        }
        m <<= 1;
    }
}

/// Bluestein chirp-z: expresses an arbitrary-length DFT as one padded
/// power-of-two convolution.
fn bluestein(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    let m = (2 * n - 1).next_power_of_two();

    // w[k] = exp(-i*pi*k^2/n); reduce k^2 mod 2n to keep the polar argument
    // small (k^2 alone is exact in f64 for our sizes, the mod just helps
    // precision of sin/cos for long traces).
    let chirp = |k: usize| -> Complex64 {
        let q = ((k as u128 * k as u128) % (2 * n as u128)) as f64;
        Complex64::from_polar(1.0, -PI * q / n as f64)
    };

    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n {
        a[k] = x[k] * chirp(k);
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = Complex64::new(1.0, 0.0);
    for k in 1..n {
        let c = chirp(k).conj();
        b[k] = c;
        b[m - k] = c;
    }

    fft_pow2(&mut a, false);
    fft_pow2(&mut b, false);
    for (ai, bi) in a.iter_mut().zip(&b) {
        *ai *= bi;
    }
    fft_pow2(&mut a, true);
    let scale = 1.0 / m as f64;
    (0..n).map(|k| a[k] * scale * chirp(k)).collect()
}

/// Linear convolution, output length `a.len() + b.len() - 1`.
pub fn convolve(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let m = out_len.next_power_of_two();
    let mut fa = vec![Complex64::new(0.0, 0.0); m];
    fa[..a.len()].copy_from_slice(a);
    let mut fb = vec![Complex64::new(0.0, 0.0); m];
    fb[..b.len()].copy_from_slice(b);
    fft_pow2(&mut fa, false);
    fft_pow2(&mut fb, false);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    fft_pow2(&mut fa, true);
    let scale = 1.0 / m as f64;
    fa.truncate(out_len);
    for x in &mut fa {
        *x *= scale;
    }
    fa
}

/// Linear convolution of real sequences.
pub fn convolve_real(a: &[f64], b: &[f64]) -> Vec<f64> {
    let ac: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let bc: Vec<Complex64> = b.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    convolve(&ac, &bc).into_iter().map(|c| c.re).collect()
}

/// Cross-correlation of `a` against real kernel `k` (kernel conjugate-less
/// since it is real): `out[i] = sum_j a[i + j] * k[j]` for `i` in
/// `-(k.len()-1) .. a.len()-1`, returned with the zero-lag entry at index
/// `k.len()-1`. Equivalent to convolving with the reversed kernel.
pub fn correlate_real_kernel(a: &[Complex64], k: &[f64]) -> Vec<Complex64> {
    let rev: Vec<Complex64> = k.iter().rev().map(|&v| Complex64::new(v, 0.0)).collect();
    convolve(a, &rev)
}
