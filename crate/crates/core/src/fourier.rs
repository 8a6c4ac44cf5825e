//! Fixed Fourier-feature embeddings of coordinates.
//!
//! A coordinate `x` in `[0, 1)^dim` maps to
//! `(cos(pi w_1 x_a), sin(pi w_1 x_a), ..., cos(pi w_F x_a), sin(pi w_F x_a))`
//! for each axis `a`, so the zero vector embeds to `(1, 0, 1, 0, ...)`.

use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FourierEmbedder {
    frequencies: Vec<f64>,
    spatial_dim: usize,
}

/// `count` values `2^e` with `e` evenly spaced in `[lo_exp, hi_exp]`.
pub fn log2_spaced(lo_exp: f64, hi_exp: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => Vec::from([math::powf(2.0, lo_exp)]),
        _ => (0..count)
            .map(|i| {
                let e = lo_exp + (hi_exp - lo_exp) * i as f64 / (count - 1) as f64;
                math::powf(2.0, e)
            })
            .collect(),
    }
}

impl FourierEmbedder {
    pub fn new(frequencies: Vec<f64>, spatial_dim: usize) -> Self {
        Self {
            frequencies,
            spatial_dim,
        }
    }

    /// `count` base-2 log-spaced frequencies between `2^lo_exp` and `2^hi_exp`.
    pub fn log_spaced(lo_exp: f64, hi_exp: f64, count: usize, spatial_dim: usize) -> Self {
        Self::new(log2_spaced(lo_exp, hi_exp, count), spatial_dim)
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn spatial_dim(&self) -> usize {
        self.spatial_dim
    }

    pub fn out_dim(&self) -> usize {
        2 * self.frequencies.len() * self.spatial_dim
    }

    /// Embeds `coords` laid out point-major (`N x spatial_dim`).
    pub fn embed(&self, coords: &[f64]) -> Tensor {
        assert_eq!(coords.len() % self.spatial_dim, 0);
        let n = coords.len() / self.spatial_dim;
        let width = self.out_dim();
        let mut out = Tensor::zeros(n, width);
        for (p, point) in coords.chunks(self.spatial_dim).enumerate() {
            let row = out.row_mut(p);
            let mut j = 0;
            for &x in point {
                for &w in &self.frequencies {
                    let phase = math::PI * w * x;
                    row[j] = math::cos(phase);
                    row[j + 1] = math::sin(phase);
                    j += 2;
                }
            }
        }
        out
    }
}

/// Frequency bands of a multi-band query embedding. Band `b` holds
/// `samples_per_band` log-spaced frequencies in `[2^e_{b-1}, 2^e_b]`, with
/// `e_0 = 0` for the first band.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BandSpec {
    pub exponents: Vec<u32>,
    pub samples_per_band: usize,
}

impl BandSpec {
    pub fn new(exponents: Vec<u32>, samples_per_band: usize) -> Self {
        Self {
            exponents,
            samples_per_band,
        }
    }

    pub fn is_ascending(&self) -> bool {
        self.exponents.windows(2).all(|w| w[0] < w[1])
    }

    pub fn embedders(&self, spatial_dim: usize) -> Vec<FourierEmbedder> {
        let mut lo = 0u32;
        self.exponents
            .iter()
            .map(|&hi| {
                let e = FourierEmbedder::log_spaced(lo as f64, hi as f64, self.samples_per_band, spatial_dim);
                lo = hi;
                e
            })
            .collect()
    }
}
