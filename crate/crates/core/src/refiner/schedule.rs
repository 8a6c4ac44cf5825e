//! Diffusion noise levels and the v-prediction algebra.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Signal fractions `alpha_bar[k]` for `k = 0..=K`. Index `K` is pure noise,
/// index `0` keeps a variance floor of `sigma_min^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    sigma_min: f64,
    alpha_bar: Vec<f64>,
}

/// `alpha_bar[k] = 1 - sigma_min^(2 (K - k) / K)`.
pub fn build_schedule(steps: usize, sigma_min: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("at least one denoising step is required".into()));
    }
    if !(sigma_min > 0.0 && sigma_min < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "minimum noise must lie in (0, 1), got {sigma_min}"
        )));
    }
    let k_total = steps as f64;
    let alpha_bar = (0..=steps)
        .map(|k| 1.0 - math::powf(sigma_min, 2.0 * (k_total - k as f64) / k_total))
        .collect();
    Ok(NoiseSchedule {
        steps,
        sigma_min,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn noise_fraction(&self, k: usize) -> f64 {
        1.0 - self.alpha_bar[k]
    }

    /// `(a, s) = (sqrt(alpha_bar), sqrt(1 - alpha_bar))` at level `k`.
    pub fn coefficients(&self, k: usize) -> (f64, f64) {
        let ab = self.alpha_bar[k];
        (math::sqrt(ab), math::sqrt(1.0 - ab))
    }
}

/// Noisy sample and velocity target: `z_k = a z0 + s eps`, `v = a eps - s z0`.
pub fn vpredict_target(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> (Tensor, Tensor) {
    let a = math::sqrt(alpha_bar);
    let s = math::sqrt(1.0 - alpha_bar);
    let zk = z0.zip_map(eps, |z, e| a * z + s * e);
    let v = z0.zip_map(eps, |z, e| a * e - s * z);
    (zk, v)
}

/// Inverts the parameterization: `z0 = a z_k - s v`, `eps = s z_k + a v`.
pub fn reconstruct(zk: &Tensor, v: &Tensor, alpha_bar: f64) -> (Tensor, Tensor) {
    let a = math::sqrt(alpha_bar);
    let s = math::sqrt(1.0 - alpha_bar);
    let z0 = zk.zip_map(v, |z, v| a * z - s * v);
    let eps = zk.zip_map(v, |z, v| s * z + a * v);
    (z0, eps)
}
