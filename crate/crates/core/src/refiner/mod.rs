//! Latent time-stepping: a conditional diffusion transformer and two
//! ablation steppers sharing one interface.

mod dit;
mod schedule;

pub use dit::{step_features, AdaLnBlock, Dit, DitConfig, REFINER_ATTENTION_LABEL};
pub use schedule::{build_schedule, reconstruct, vpredict_target, NoiseSchedule};

use alloc::format;
use alloc::string::String;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::Mlp;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Something that predicts the velocity of the noisy target half.
pub trait VelocityModel {
    fn velocity(&self, cond: &Tensor, noisy: &Tensor, k: usize) -> Result<Tensor>;
}

/// Draws `Z_K ~ N(0, I)` and walks the levels `K, K-1, ..., 1` with the
/// deterministic (eta = 0) update. The last step returns the clean estimate.
pub fn sample_next<M: VelocityModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let init = Tensor::from_fn(cond.rows(), cond.cols(), |_, _| rng.sample(StandardNormal));
    denoise_from(model, cond, init, schedule)
}

/// Reverse process from a given `Z_K`.
pub fn denoise_from<M: VelocityModel + ?Sized>(
    model: &M,
    cond: &Tensor,
    init: Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let mut z = init;
    for k in (1..=schedule.steps()).rev() {
        let v = model.velocity(cond, &z, k)?;
        if v.shape() != z.shape() {
            return Err(Error::Config(format!(
                "velocity model returned {:?} for {:?} tokens",
                v.shape(),
                z.shape()
            )));
        }
        let (z0, eps) = reconstruct(&z, &v, schedule.alpha_bar(k));
        if k == 1 {
            return Ok(z0);
        }
        let (a, s) = schedule.coefficients(k - 1);
        z = z0.zip_map(&eps, |x, e| a * x + s * e);
    }
    unreachable!("schedules have at least one step")
}

/// Per-channel affine standardization of latent tokens before they enter the
/// stepper. Kept in the parameter store so it travels with the weights; it
/// never receives gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentScaler {
    pub mean: ParamId,
    pub std: ParamId,
}

impl LatentScaler {
    pub fn new(store: &mut ParamStore, prefix: &str, latent_dim: usize) -> Self {
        Self {
            mean: store.insert(format!("{prefix}/latent_mean"), Tensor::zeros(1, latent_dim)),
            std: store.insert(format!("{prefix}/latent_std"), Tensor::filled(1, latent_dim, 1.0)),
        }
    }

    /// Sets the statistics from a stack of `M x h` token arrays. Channels with
    /// (near) zero spread keep a unit scale.
    pub fn fit<'t>(&self, store: &mut ParamStore, samples: impl IntoIterator<Item = &'t Tensor>) {
        self.fit_posterior(store, samples.into_iter().map(|m| (m, None)));
    }

    /// Like [`fit`](Self::fit) for draws `mu + sigma * eps`: each channel's
    /// variance is the spread of the means plus the mean posterior variance.
    /// Collapsed channels (constant mean, unit sigma) then stay near unit scale
    /// instead of being blown up by the tiny spread of their means.
    pub fn fit_posterior<'t>(
        &self,
        store: &mut ParamStore,
        posteriors: impl IntoIterator<Item = (&'t Tensor, Option<&'t Tensor>)>,
    ) {
        let h = store.get(self.mean).cols();
        let mut sum = alloc::vec![0.0; h];
        let mut sq = alloc::vec![0.0; h];
        let mut noise = alloc::vec![0.0; h];
        let mut count = 0usize;
        for (mu, sigma) in posteriors {
            for r in 0..mu.rows() {
                for (c, &x) in mu.row(r).iter().enumerate() {
                    sum[c] += x;
                    sq[c] += x * x;
                }
                if let Some(s) = sigma {
                    for (c, &x) in s.row(r).iter().enumerate() {
                        noise[c] += x * x;
                    }
                }
                count += 1;
            }
        }
        if count == 0 {
            return;
        }
        let n = count as f64;
        let mean: alloc::vec::Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .zip(&noise)
            .map(|((q, m), e)| {
                let var = (q / n - m * m).max(0.0) + e / n;
                let s = math::sqrt(var);
                if s > 1e-8 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        *store.get_mut(self.mean) = Tensor::row_vector(mean);
        *store.get_mut(self.std) = Tensor::row_vector(std);
    }

    pub fn standardize(&self, params: &ParamStore, z: &Tensor) -> Tensor {
        let (m, s) = (params.get(self.mean), params.get(self.std));
        Tensor::from_fn(z.rows(), z.cols(), |r, c| (z.get(r, c) - m.get(0, c)) / s.get(0, c))
    }

    pub fn destandardize(&self, params: &ParamStore, z: &Tensor) -> Tensor {
        let (m, s) = (params.get(self.mean), params.get(self.std));
        Tensor::from_fn(z.rows(), z.cols(), |r, c| z.get(r, c) * s.get(0, c) + m.get(0, c))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum StepperKind {
    Diffusion,
    Deterministic,
    Mlp,
}

impl StepperKind {
    pub fn name(self) -> &'static str {
        match self {
            StepperKind::Diffusion => "diffusion",
            StepperKind::Deterministic => "deterministic",
            StepperKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(StepperKind::Diffusion),
            "deterministic" => Ok(StepperKind::Deterministic),
            "mlp" => Ok(StepperKind::Mlp),
            other => Err(Error::Config(format!("unknown stepper kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RefinerConfig {
    pub kind: StepperKind,
    pub dit: DitConfig,
    pub denoising_steps: usize,
    pub min_noise: f64,
    /// Hidden width and depth of the token-wise MLP stepper.
    pub mlp_width: usize,
    pub mlp_depth: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            kind: StepperKind::Diffusion,
            dit: DitConfig::default(),
            denoising_steps: 3,
            min_noise: 1e-2,
            mlp_width: 128,
            mlp_depth: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Backbone {
    Transformer(Dit),
    TokenMlp(Mlp),
}

/// Step index fed to the transformer when it is used without noise.
pub const DETERMINISTIC_STEP: f64 = 0.0;

/// A trained latent stepper `Z^t -> Z^{t+dt}` in raw latent coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Refiner {
    config: RefinerConfig,
    schedule: NoiseSchedule,
    backbone: Backbone,
    pub scaler: LatentScaler,
}

struct DitVelocity<'a> {
    dit: &'a Dit,
    params: &'a ParamStore,
}

impl VelocityModel for DitVelocity<'_> {
    fn velocity(&self, cond: &Tensor, noisy: &Tensor, k: usize) -> Result<Tensor> {
        self.dit.predict(self.params, cond, noisy, k as f64)
    }
}

impl Refiner {
    /// Registers parameters under `refiner/`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, config: RefinerConfig) -> Result<Self> {
        let schedule = build_schedule(config.denoising_steps, config.min_noise)?;
        let backbone = match config.kind {
            StepperKind::Diffusion | StepperKind::Deterministic => {
                Backbone::Transformer(Dit::new(store, rng, "refiner", config.dit.clone())?)
            }
            StepperKind::Mlp => Backbone::TokenMlp(Mlp::new(
                store,
                rng,
                "refiner/mlp",
                config.dit.latent_dim,
                config.mlp_width,
                config.mlp_depth,
                config.dit.latent_dim,
                true,
            )),
        };
        let scaler = LatentScaler::new(store, "refiner", config.dit.latent_dim);
        Ok(Self {
            config,
            schedule,
            backbone,
            scaler,
        })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.config
    }

    pub fn kind(&self) -> StepperKind {
        self.config.kind
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn dit(&self) -> Option<&Dit> {
        match &self.backbone {
            Backbone::Transformer(d) => Some(d),
            Backbone::TokenMlp(_) => None,
        }
    }

    /// Training loss of one standardized pair. Returns the scalar loss node.
    pub fn loss<R: Rng + ?Sized>(&self, g: &mut Graph<'_>, cond: &Tensor, next: &Tensor, rng: &mut R) -> Result<Var> {
        match (&self.backbone, self.config.kind) {
            (Backbone::Transformer(dit), StepperKind::Diffusion) => {
                let k = rng.random_range(1..=self.schedule.steps());
                let eps = Tensor::from_fn(next.rows(), next.cols(), |_, _| rng.sample(StandardNormal));
                let (zk, v) = vpredict_target(next, &eps, self.schedule.alpha_bar(k));
                let c = g.input(cond.clone());
                let t = g.input(zk);
                let pred = dit.forward(g, c, t, k as f64)?;
                Ok(g.mse_to(pred, v))
            }
            (Backbone::Transformer(dit), _) => {
                let c = g.input(cond.clone());
                let t = g.input(Tensor::zeros(next.rows(), next.cols()));
                let pred = dit.forward(g, c, t, DETERMINISTIC_STEP)?;
                Ok(g.mse_to(pred, next.clone()))
            }
            (Backbone::TokenMlp(mlp), _) => {
                let c = g.input(cond.clone());
                let pred = mlp.forward(g, c);
                if !g.value(pred).all_finite() {
                    return Err(Error::RefinerNumerical);
                }
                Ok(g.mse_to(pred, next.clone()))
            }
        }
    }

    /// One step in standardized coordinates.
    pub fn step_standardized<R: Rng + ?Sized>(&self, params: &ParamStore, z: &Tensor, rng: &mut R) -> Result<Tensor> {
        match (&self.backbone, self.config.kind) {
            (Backbone::Transformer(dit), StepperKind::Diffusion) => {
                sample_next(&DitVelocity { dit, params }, z, &self.schedule, rng)
            }
            (Backbone::Transformer(dit), _) => {
                dit.predict(params, z, &Tensor::zeros(z.rows(), z.cols()), DETERMINISTIC_STEP)
            }
            (Backbone::TokenMlp(mlp), _) => {
                let mut g = Graph::inference(params);
                let c = g.input(z.clone());
                let out = mlp.forward(&mut g, c);
                let out = g.value(out).clone();
                if !out.all_finite() {
                    return Err(Error::RefinerNumerical);
                }
                Ok(out)
            }
        }
    }

    /// `Z^t -> Z^{t+dt}` on raw latents. Only the diffusion stepper draws
    /// from `rng`.
    pub fn step<R: Rng + ?Sized>(&self, params: &ParamStore, z: &Tensor, rng: &mut R) -> Result<Tensor> {
        let s = self.scaler.standardize(params, z);
        let next = self.step_standardized(params, &s, rng)?;
        Ok(self.scaler.destandardize(params, &next))
    }

    pub fn describe(&self) -> String {
        format!(
            "{} stepper, K={}, min_noise={}",
            self.config.kind.name(),
            self.config.denoising_steps,
            self.config.min_noise
        )
    }
}
