//! Training objectives shared by the two optimisation stages.

use crate::math;
use crate::tensor::Tensor;

/// `KL(N(mu, sigma^2) || N(0, I))` summed over every token and channel:
/// `0.5 * sum(mu^2 + sigma^2 - 1 - 2 log sigma)`.
pub fn kl_divergence(mu: &Tensor, log_sigma: &Tensor) -> f64 {
    assert_eq!(mu.shape(), log_sigma.shape());
    0.5 * mu
        .data()
        .iter()
        .zip(log_sigma.data())
        .map(|(m, l)| m * m + math::exp(2.0 * l) - 1.0 - 2.0 * l)
        .sum::<f64>()
}
