//! In-place radix-2 complex FFT for the spectral solvers.

use alloc::vec::Vec;

use num_complex::Complex64;

use crate::math;

/// Precomputed twiddles and bit-reversal table for one power-of-two length.
#[derive(Clone, Debug)]
pub struct Fft {
    n: usize,
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl Fft {
    /// Panics unless `n` is a power of two.
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT length {n} is not a power of two");
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| {
                let a = -2.0 * math::PI * k as f64 / n as f64;
                Complex64::new(math::cos(a), math::sin(a))
            })
            .collect();
        Self { n, twiddles, bitrev }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.n);
        for i in 0..self.n {
            let j = self.bitrev[i];
            if i < j {
                data.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= self.n {
            let half = len / 2;
            let step = self.n / len;
            for start in (0..self.n).step_by(len) {
                for k in 0..half {
                    let mut w = self.twiddles[k * step];
                    if inverse {
                        w = w.conj();
                    }
                    let a = data[start + k];
                    let b = data[start + k + half] * w;
                    data[start + k] = a + b;
                    data[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }

    /// `X_k = sum_j x_j exp(-2 pi i j k / n)`.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    /// Inverse including the `1/n` factor.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, true);
        let s = 1.0 / self.n as f64;
        for x in data.iter_mut() {
            *x *= s;
        }
    }
}

/// 2D transform of a square `n x n` row-major array.
#[derive(Clone, Debug)]
pub struct Fft2 {
    line: Fft,
    scratch: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        Self {
            line: Fft::new(n),
            scratch: alloc::vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn size(&self) -> usize {
        self.line.len()
    }

    fn apply(&mut self, data: &mut [Complex64], inverse: bool) {
        let n = self.line.len();
        assert_eq!(data.len(), n * n);
        for row in data.chunks_mut(n) {
            if inverse {
                self.line.inverse(row);
            } else {
                self.line.forward(row);
            }
        }
        for c in 0..n {
            for r in 0..n {
                self.scratch[r] = data[r * n + c];
            }
            if inverse {
                self.line.inverse(&mut self.scratch);
            } else {
                self.line.forward(&mut self.scratch);
            }
            for r in 0..n {
                data[r * n + c] = self.scratch[r];
            }
        }
    }

    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.apply(data, false);
    }

    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.apply(data, true);
    }
}

/// Signed integer wavenumber of FFT bin `j` for length `n`.
#[inline]
pub fn wavenumber(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(j, v)| {
                        let a = -2.0 * math::PI * (j * k) as f64 / n as f64;
                        v * Complex64::new(math::cos(a), math::sin(a))
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn matches_direct_dft() {
        for n in [1, 2, 8, 64] {
            let x: Vec<Complex64> = (0..n)
                .map(|i| Complex64::new((i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()))
                .collect();
            let mut y = x.clone();
            Fft::new(n).forward(&mut y);
            for (a, b) in y.iter().zip(naive_dft(&x)) {
                assert!((a - b).norm() < 1e-10);
            }
            Fft::new(n).inverse(&mut y);
            for (a, b) in y.iter().zip(&x) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn two_dimensional_round_trip() {
        let n = 16;
        let x: Vec<Complex64> = (0..n * n).map(|i| Complex64::new((i as f64).sin(), 0.0)).collect();
        let mut y = x.clone();
        let mut f = Fft2::new(n);
        f.forward(&mut y);
        f.inverse(&mut y);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
