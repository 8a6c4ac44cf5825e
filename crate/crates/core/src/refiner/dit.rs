//! Transformer over the stacked `(conditioning, noisy target)` token sequence
//! with adaptive layer-norm conditioning on the diffusion step.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{Attention, AttentionDims, LayerNorm, Linear};
use crate::params::{normal_init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DitConfig {
    /// Token count `M` of one state.
    pub num_tokens: usize,
    /// Token width `h` of the latent space.
    pub latent_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Width of the sinusoidal step features.
    pub step_features: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            num_tokens: 32,
            latent_dim: 8,
            hidden: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            step_features: 64,
        }
    }
}

pub const REFINER_ATTENTION_LABEL: &str = "refiner/self";

/// Sinusoidal features `(cos(k f_i), sin(k f_i))` with `f_i = 10000^(-i/half)`.
pub fn step_features(k: f64, width: usize) -> Tensor {
    let half = width / 2;
    let mut out = Tensor::zeros(1, width);
    for i in 0..half {
        let f = math::exp(-math::ln(10000.0) * i as f64 / half as f64);
        out.set(0, i, math::cos(k * f));
        out.set(0, half + i, math::sin(k * f));
    }
    out
}

/// Residual block whose two branches are pre-normalized, modulated by
/// `x (1 + scale) + shift` and gated, all from the step embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaLnBlock {
    pub attn_modulation: Linear,
    pub mlp_modulation: Linear,
    pub norm: LayerNorm,
    pub attn: Attention,
    pub fc1: Linear,
    pub fc2: Linear,
    hidden: usize,
}

impl AdaLnBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &DitConfig) -> Self {
        let h = cfg.hidden;
        let mlp_hidden = math::floor(h as f64 * cfg.mlp_ratio + 0.5) as usize;
        Self {
            attn_modulation: Linear::zeros(store, &format!("{name}/attn_modulation"), h, 3 * h, true),
            mlp_modulation: Linear::zeros(store, &format!("{name}/mlp_modulation"), h, 3 * h, true),
            norm: LayerNorm::new(store, &format!("{name}/norm"), h, false),
            attn: Attention::new(
                store,
                rng,
                &format!("{name}/attn"),
                AttentionDims {
                    query_dim: h,
                    context_dim: h,
                    out_dim: h,
                    heads: cfg.heads,
                    dim_head: h / cfg.heads,
                    bias: true,
                },
            ),
            fc1: Linear::new(store, rng, &format!("{name}/fc1"), h, mlp_hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}/fc2"), mlp_hidden, h, true),
            hidden: h,
        }
    }

    /// `act_cond` is `SiLU(c)`, shared by every block.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, act_cond: Var) -> Var {
        let h = self.hidden;
        let m1 = self.attn_modulation.forward(g, act_cond);
        let (shift1, scale1, gate1) = (g.slice_cols(m1, 0, h), g.slice_cols(m1, h, h), g.slice_cols(m1, 2 * h, h));
        let n = self.norm.forward(g, x);
        let n = g.modulate(n, scale1, shift1);
        let a = self.attn.forward(g, n, n, n, REFINER_ATTENTION_LABEL).out;
        let a = g.mul_row(a, gate1);
        let x = g.add(x, a);

        let m2 = self.mlp_modulation.forward(g, act_cond);
        let (shift2, scale2, gate2) = (g.slice_cols(m2, 0, h), g.slice_cols(m2, h, h), g.slice_cols(m2, 2 * h, h));
        let n = self.norm.forward(g, x);
        let n = g.modulate(n, scale2, shift2);
        let f = self.fc1.forward(g, n);
        let f = g.gelu(f);
        let f = self.fc2.forward(g, f);
        let f = g.mul_row(f, gate2);
        g.add(x, f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dit {
    config: DitConfig,
    pub input_proj: Linear,
    pub positions: ParamId,
    pub step_fc1: Linear,
    pub step_fc2: Linear,
    pub blocks: Vec<AdaLnBlock>,
    pub final_modulation: Linear,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

impl Dit {
    /// Registers parameters under `{prefix}/`. Modulation layers and the
    /// output head start at zero, so every block is the identity and the
    /// output is zero at initialization.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, config: DitConfig) -> Result<Self> {
        if config.heads == 0 || !config.hidden.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                config.hidden, config.heads
            )));
        }
        if !config.step_features.is_multiple_of(2) {
            return Err(Error::Config("step feature width must be even".into()));
        }
        let h = config.hidden;
        let input_proj = Linear::new(store, rng, &format!("{prefix}/input_proj"), config.latent_dim, h, true);
        let positions = store.insert(
            format!("{prefix}/positions"),
            normal_init(rng, 2 * config.num_tokens, h, 0.02),
        );
        let step_fc1 = Linear::new(store, rng, &format!("{prefix}/step/fc1"), config.step_features, h, true);
        let step_fc2 = Linear::new(store, rng, &format!("{prefix}/step/fc2"), h, h, true);
        let blocks = (0..config.depth)
            .map(|i| AdaLnBlock::new(store, rng, &format!("{prefix}/blocks/{i}"), &config))
            .collect();
        let final_modulation = Linear::zeros(store, &format!("{prefix}/final/modulation"), h, 2 * h, true);
        let final_norm = LayerNorm::new(store, &format!("{prefix}/final/norm"), h, false);
        let head = Linear::zeros(store, &format!("{prefix}/final/head"), h, config.latent_dim, true);
        Ok(Self {
            config,
            input_proj,
            positions,
            step_fc1,
            step_fc2,
            blocks,
            final_modulation,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &DitConfig {
        &self.config
    }

    /// Step embedding `c = W2 SiLU(W1 sinusoid(k))`.
    pub fn step_embedding(&self, g: &mut Graph<'_>, k: f64) -> Var {
        let s = g.input(step_features(k, self.config.step_features));
        let c = self.step_fc1.forward(g, s);
        let c = g.silu(c);
        self.step_fc2.forward(g, c)
    }

    /// Token stream after the input projection and position embedding, `2M x hidden`.
    pub fn embed_sequence(&self, g: &mut Graph<'_>, cond: Var, target: Var) -> Var {
        let seq = g.concat_rows(&[cond, target]);
        let x = self.input_proj.forward(g, seq);
        let pos = g.param(self.positions);
        g.add(x, pos)
    }

    /// Output for the target half, `M x h`.
    pub fn forward(&self, g: &mut Graph<'_>, cond: Var, target: Var, k: f64) -> Result<Var> {
        let m = self.config.num_tokens;
        let shape = (m, self.config.latent_dim);
        if g.value(cond).shape() != shape || g.value(target).shape() != shape {
            return Err(Error::Shape(format!(
                "refiner expects {m}x{} tokens, got {:?} and {:?}",
                self.config.latent_dim,
                g.value(cond).shape(),
                g.value(target).shape()
            )));
        }
        let mut x = self.embed_sequence(g, cond, target);
        let c = self.step_embedding(g, k);
        let act = g.silu(c);
        for block in &self.blocks {
            x = block.forward(g, x, act);
        }
        let h = self.config.hidden;
        let fm = self.final_modulation.forward(g, act);
        let (shift, scale) = (g.slice_cols(fm, 0, h), g.slice_cols(fm, h, h));
        let n = self.final_norm.forward(g, x);
        let n = g.modulate(n, scale, shift);
        let tail = g.slice_rows(n, m, m);
        let out = self.head.forward(g, tail);
        if !g.value(out).all_finite() {
            return Err(Error::RefinerNumerical);
        }
        Ok(out)
    }

    /// Inference evaluation on plain tensors.
    pub fn predict(&self, params: &ParamStore, cond: &Tensor, target: &Tensor, k: f64) -> Result<Tensor> {
        let mut g = Graph::inference(params);
        let c = g.input(cond.clone());
        let t = g.input(target.clone());
        let out = self.forward(&mut g, c, t, k)?;
        Ok(g.value(out).clone())
    }
}
