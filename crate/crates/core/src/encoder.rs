//! Point-set encoder: `N` observations to `M` latent tokens.
//!
//! 1. positional embedding `gamma = Linear(FourierFeatures(x))` and value
//!    embedding `v = Linear(u(x))`, both `N x d`;
//! 2. optional geometry pass where learned queries `T` attend over `gamma`;
//! 3. observation pass where `T_geo` attends with keys from `gamma` and values
//!    from `v`;
//! 4. token-wise bottleneck to `mu`, `log sigma` (`M x h`) and a Gaussian draw.
//!
//! Every attention score matrix is `M x N`; nothing in here is quadratic in `N`.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::field::{FieldSnapshot, LatentTokens};
use crate::fourier::FourierEmbedder;
use crate::math;
use crate::nn::{Attention, AttentionDims, FeedForward, LayerNorm, Linear};
use crate::params::{normal_init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EncoderConfig {
    pub spatial_dim: usize,
    pub channels: usize,
    /// Token width `d`.
    pub hidden_dim: usize,
    /// Number of latent tokens `M`.
    pub num_latents: usize,
    /// Bottleneck width `h`.
    pub latent_dim: usize,
    pub cross_heads: usize,
    pub cross_dim_head: usize,
    /// Highest frequency exponent of the positional embedding.
    pub max_encoding_freq: f64,
    pub num_frequencies: usize,
    pub encode_geo: bool,
    pub value_bias: bool,
    pub ffn_mult: usize,
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            spatial_dim: 1,
            channels: 1,
            hidden_dim: 128,
            num_latents: 32,
            latent_dim: 8,
            cross_heads: 4,
            cross_dim_head: 32,
            max_encoding_freq: 4.0,
            num_frequencies: 16,
            encode_geo: false,
            value_bias: true,
            ffn_mult: 4,
            log_sigma_min: -10.0,
            log_sigma_max: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    /// Sample `Z = mu + sigma * eps`.
    Train,
    /// Return `Z = mu`.
    Eval,
}

/// Cross-attention from tokens onto a point set followed by a pre-norm FFN:
/// `T' = T + FFN(CrossAttention(LN(T), keys, values))`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionBlock {
    pub query_norm: LayerNorm,
    pub context_norm: LayerNorm,
    pub attn: Attention,
    pub ffn: FeedForward,
}

impl CrossAttentionBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &EncoderConfig) -> Self {
        let d = cfg.hidden_dim;
        Self {
            query_norm: LayerNorm::new(store, &format!("{name}/query_norm"), d, true),
            context_norm: LayerNorm::new(store, &format!("{name}/context_norm"), d, true),
            attn: Attention::new(
                store,
                rng,
                &format!("{name}/attn"),
                AttentionDims {
                    query_dim: d,
                    context_dim: d,
                    out_dim: d,
                    heads: cfg.cross_heads,
                    dim_head: cfg.cross_dim_head,
                    bias: false,
                },
            ),
            ffn: FeedForward::new(store, rng, &format!("{name}/ffn"), d, cfg.ffn_mult * d),
        }
    }

    /// Returns the updated tokens and the attention node.
    fn forward(
        &self,
        g: &mut Graph<'_>,
        tokens: Var,
        keys: Var,
        values: Var,
        label: &'static str,
    ) -> (Var, Var) {
        let q = self.query_norm.forward(g, tokens);
        let a = self.attn.forward(g, q, keys, values, label);
        let f = self.ffn.forward(g, a.out);
        (g.add(tokens, f), a.weights)
    }
}

/// Graph handles produced by one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub t_geo: Var,
    pub t_obs: Var,
    pub mu: Var,
    pub log_sigma: Var,
    pub z: Var,
    pub geometry_attention: Option<Var>,
    pub observation_attention: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    embedder: FourierEmbedder,
    pub pos_proj: Linear,
    pub value_proj: Linear,
    pub queries: ParamId,
    pub geometry: Option<CrossAttentionBlock>,
    pub observation: CrossAttentionBlock,
    pub to_mu: Linear,
    pub to_log_sigma: Linear,
}

pub const GEOMETRY_LABEL: &str = "encoder/geometry";
pub const OBSERVATION_LABEL: &str = "encoder/observation";

impl Encoder {
    /// Registers parameters under `encoder/`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, config: EncoderConfig) -> Self {
        let embedder = FourierEmbedder::log_spaced(
            0.0,
            config.max_encoding_freq,
            config.num_frequencies,
            config.spatial_dim,
        );
        let d = config.hidden_dim;
        let pos_proj = Linear::new(store, rng, "encoder/pos_proj", embedder.out_dim(), d, true);
        let value_proj = Linear::new(store, rng, "encoder/value_proj", config.channels, d, config.value_bias);
        let queries = store.insert("encoder/queries", normal_init(rng, config.num_latents, d, 0.02));
        let geometry = config
            .encode_geo
            .then(|| CrossAttentionBlock::new(store, rng, "encoder/geometry", &config));
        let observation = CrossAttentionBlock::new(store, rng, "encoder/observation", &config);
        let to_mu = Linear::new(store, rng, "encoder/to_mu", d, config.latent_dim, true);
        let to_log_sigma = Linear::new(store, rng, "encoder/to_log_sigma", d, config.latent_dim, true);
        Self {
            config,
            embedder,
            pos_proj,
            value_proj,
            queries,
            geometry,
            observation,
            to_mu,
            to_log_sigma,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embedder(&self) -> &FourierEmbedder {
        &self.embedder
    }

    fn check(&self, snapshot: &FieldSnapshot) -> Result<()> {
        if snapshot.spatial_dim() != self.config.spatial_dim || snapshot.channels() != self.config.channels {
            return Err(Error::Shape(format!(
                "snapshot is {}-d with {} channels, encoder expects {}-d with {}",
                snapshot.spatial_dim(),
                snapshot.channels(),
                self.config.spatial_dim,
                self.config.channels
            )));
        }
        if snapshot.is_empty() {
            return Err(Error::EmptyObservationSet);
        }
        Ok(())
    }

    /// Positional and value embeddings, each `N x d`.
    pub fn embed(&self, g: &mut Graph<'_>, snapshot: &FieldSnapshot) -> Result<(Var, Var)> {
        self.check(snapshot)?;
        let ff = g.input(self.embedder.embed(snapshot.coords()));
        let gamma = self.pos_proj.forward(g, ff);
        let u = g.input(snapshot.values_tensor());
        let v = self.value_proj.forward(g, u);
        Ok((gamma, v))
    }

    /// `T_geo`; the learned queries themselves when geometry encoding is off.
    pub fn encode_geometry(&self, g: &mut Graph<'_>, gamma: Var) -> (Var, Option<Var>) {
        let t = g.param(self.queries);
        match &self.geometry {
            Some(block) => {
                let ctx = block.context_norm.forward(g, gamma);
                let (t_geo, w) = block.forward(g, t, ctx, ctx, GEOMETRY_LABEL);
                (t_geo, Some(w))
            }
            None => (t, None),
        }
    }

    /// `T_obs`: keys carry locations, values carry observations.
    pub fn encode_observations(&self, g: &mut Graph<'_>, t_geo: Var, gamma: Var, v: Var) -> Result<(Var, Var)> {
        if g.value(gamma).rows() == 0 {
            return Err(Error::EmptyObservationSet);
        }
        let keys = self.observation.context_norm.forward(g, gamma);
        Ok(self.observation.forward(g, t_geo, keys, v, OBSERVATION_LABEL))
    }

    /// Token-wise bottleneck and Gaussian draw. Returns `(mu, log_sigma, z)`.
    pub fn bottleneck_and_sample<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        t_obs: Var,
        mode: EncodeMode,
        rng: &mut R,
    ) -> Result<(Var, Var, Var)> {
        let mu = self.to_mu.forward(g, t_obs);
        let raw = self.to_log_sigma.forward(g, t_obs);
        let log_sigma = g.clamp(raw, self.config.log_sigma_min, self.config.log_sigma_max);
        if !g.value(mu).all_finite() || !g.value(log_sigma).all_finite() {
            return Err(Error::EncoderNumerical);
        }
        let z = match mode {
            EncodeMode::Eval => mu,
            EncodeMode::Train => {
                let (m, h) = g.value(mu).shape();
                let eps = Tensor::from_fn(m, h, |_, _| rng.sample::<f64, _>(StandardNormal));
                let sigma = g.exp(log_sigma);
                let e = g.input(eps);
                let noise = g.mul(sigma, e);
                g.add(mu, noise)
            }
        };
        Ok((mu, log_sigma, z))
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        snapshot: &FieldSnapshot,
        mode: EncodeMode,
        rng: &mut R,
    ) -> Result<EncoderVars> {
        let (gamma, v) = self.embed(g, snapshot)?;
        let (t_geo, geometry_attention) = self.encode_geometry(g, gamma);
        let (t_obs, observation_attention) = self.encode_observations(g, t_geo, gamma, v)?;
        let (mu, log_sigma, z) = self.bottleneck_and_sample(g, t_obs, mode, rng)?;
        Ok(EncoderVars {
            t_geo,
            t_obs,
            mu,
            log_sigma,
            z,
            geometry_attention,
            observation_attention,
        })
    }

    /// Evaluation-mode encoding (`Z = mu`) without gradient bookkeeping.
    pub fn encode(&self, params: &ParamStore, snapshot: &FieldSnapshot) -> Result<LatentTokens> {
        let mut g = Graph::inference(params);
        let vars = self.forward(&mut g, snapshot, EncodeMode::Eval, &mut NoRng)?;
        Ok(LatentTokens {
            z: g.value(vars.z).clone(),
            mu: g.value(vars.mu).clone(),
            log_sigma: g.value(vars.log_sigma).clone(),
        })
    }

    /// Training-mode encoding with a fresh Gaussian draw.
    pub fn encode_sample<R: Rng + ?Sized>(
        &self,
        params: &ParamStore,
        snapshot: &FieldSnapshot,
        rng: &mut R,
    ) -> Result<LatentTokens> {
        let mut g = Graph::inference(params);
        let vars = self.forward(&mut g, snapshot, EncodeMode::Train, rng)?;
        Ok(LatentTokens {
            z: g.value(vars.z).clone(),
            mu: g.value(vars.mu).clone(),
            log_sigma: g.value(vars.log_sigma).clone(),
        })
    }
}

/// Drops `floor(ratio * N)` points uniformly at random; the kept points stay
/// in their original order. Only meant for training-time inputs.
pub fn sequence_dropout<R: Rng + ?Sized>(snapshot: &FieldSnapshot, ratio: f64, rng: &mut R) -> Result<FieldSnapshot> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidRatio(ratio));
    }
    let n = snapshot.len();
    let dropped = math::floor(ratio * n as f64) as usize;
    if dropped == 0 {
        return Ok(snapshot.clone());
    }
    let mut keep: Vec<usize> = index::sample(rng, n, n - dropped).into_vec();
    keep.sort_unstable();
    Ok(snapshot.select(&keep))
}

/// Placeholder generator for evaluation paths that never draw.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation-mode encoding does not sample")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation-mode encoding does not sample")
    }
    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("evaluation-mode encoding does not sample")
    }
}
