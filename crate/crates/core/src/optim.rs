//! AdamW and the cosine learning-rate schedule.

use alloc::vec::Vec;

use crate::math;
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `lr(t) = lr_min + (lr_max - lr_min) (1 + cos(pi t / total)) / 2`, clamped
/// to `t in [0, total]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr_max;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math::cos(math::PI * t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    trainable: Vec<bool>,
}

impl AdamW {
    /// Only parameters in `trainable` are ever touched.
    pub fn new(store: &ParamStore, trainable: &[ParamId], weight_decay: f64) -> Self {
        let mut mask = alloc::vec![false; store.len()];
        for id in trainable {
            mask[id.index()] = true;
        }
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: (0..store.len()).map(|_| None).collect(),
            second: (0..store.len()).map(|_| None).collect(),
            trainable: mask,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - math::powf(self.beta1, t as f64);
        let bc2 = 1.0 - math::powf(self.beta2, t as f64);
        for (id, g) in grads.iter() {
            let i = id.index();
            if !self.trainable.get(i).copied().unwrap_or(false) {
                continue;
            }
            let p = store.get_mut(id);
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let decay = 1.0 - lr * self.weight_decay;
            for (((w, &gr), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w = *w * decay - lr * mh / (math::sqrt(vh) + self.eps);
            }
        }
    }
}
