#![allow(dead_code)]

use aroma_core::{Grads, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    use rand::Rng;
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Central differences over every parameter entry; returns the worst
/// per-tensor relative error `|analytic - numeric| / max(|analytic|, |numeric|)`.
pub fn max_relative_grad_error(
    store: &ParamStore,
    grads: &Grads,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for (id, name, value) in store.iter() {
        let mut numeric = Tensor::zeros(value.rows(), value.cols());
        for i in 0..value.len() {
            let orig = value.data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            numeric.data_mut()[i] = (up - down) / (2.0 * h);
        }
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(value.rows(), value.cols()));
        let diff = analytic.zip_map(&numeric, |a, b| a - b).sum_squares().sqrt();
        let scale = analytic.sum_squares().sqrt().max(numeric.sum_squares().sqrt());
        if scale > 1e-9 {
            let rel = diff / scale;
            if rel > worst {
                eprintln!("{name}: relative gradient error {rel:.3e}");
            }
            worst = worst.max(rel);
        } else {
            assert!(diff < 1e-8, "{name}: gradient {diff} where both sides vanish");
        }
    }
    worst
}
