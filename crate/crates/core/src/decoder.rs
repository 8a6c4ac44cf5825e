//! Conditional neural field: latent tokens to values at arbitrary coordinates.
//!
//! Tokens are lifted to width `d` and mixed by a self-attention stack. Each
//! query coordinate is embedded once per frequency band and cross-attends to
//! the tokens; the per-band features are concatenated and read out by an MLP.
//! Every query is processed independently of the others.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::field::check_domain;
use crate::fourier::{BandSpec, FourierEmbedder};
use crate::math;
use crate::nn::{Attention, AttentionDims, LayerNorm, Linear, Mlp, SelfAttentionBlock};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DecoderConfig {
    pub spatial_dim: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub num_self_attentions: usize,
    pub self_heads: usize,
    pub self_dim_head: usize,
    pub cross_heads: usize,
    pub cross_dim_head: usize,
    pub bands: BandSpec,
    /// Width of each band's local feature.
    pub feature_dim: usize,
    /// Width of the read-out MLP.
    pub dim: usize,
    /// Hidden layers of the read-out MLP.
    pub depth_inr: usize,
    pub mlp_bias: bool,
    pub ffn_mult: usize,
    /// Map queries into `[0, 1)` with `x - floor(x)` instead of rejecting them.
    pub periodic_wrap: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            spatial_dim: 1,
            channels: 1,
            latent_dim: 8,
            hidden_dim: 128,
            num_self_attentions: 2,
            self_heads: 4,
            self_dim_head: 32,
            cross_heads: 4,
            cross_dim_head: 32,
            bands: BandSpec::new(Vec::from([3, 4, 5]), 16),
            feature_dim: 16,
            dim: 128,
            depth_inr: 3,
            mlp_bias: true,
            ffn_mult: 4,
            periodic_wrap: false,
        }
    }
}

pub const SELF_ATTENTION_LABEL: &str = "decoder/self";
pub const BAND_LABEL: &str = "decoder/band";

/// Cross-attention of one frequency band.
#[derive(Clone, Debug, PartialEq)]
pub struct BandReader {
    pub embedder: FourierEmbedder,
    pub attn: Attention,
}

/// Graph handles of one band evaluation.
#[derive(Clone, Copy, Debug)]
pub struct BandVars {
    pub features: Var,
    pub weights: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    config: DecoderConfig,
    pub lift: Linear,
    pub blocks: Vec<SelfAttentionBlock>,
    pub token_norm: LayerNorm,
    pub bands: Vec<BandReader>,
    pub head: Mlp,
}

impl Decoder {
    /// Registers parameters under `decoder/`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, config: DecoderConfig) -> Result<Self> {
        if !config.bands.is_ascending() || config.bands.exponents.is_empty() {
            return Err(Error::Config(format!(
                "decoder bands must be non-empty and ascending, got {:?}",
                config.bands.exponents
            )));
        }
        let d = config.hidden_dim;
        let lift = Linear::new(store, rng, "decoder/lift", config.latent_dim, d, true);
        let blocks = (0..config.num_self_attentions)
            .map(|i| {
                SelfAttentionBlock::new(
                    store,
                    rng,
                    &format!("decoder/self/{i}"),
                    d,
                    config.self_heads,
                    config.self_dim_head,
                    config.ffn_mult * d,
                )
            })
            .collect();
        let token_norm = LayerNorm::new(store, "decoder/token_norm", d, true);
        let bands = config
            .bands
            .embedders(config.spatial_dim)
            .into_iter()
            .enumerate()
            .map(|(b, embedder)| {
                let attn = Attention::new(
                    store,
                    rng,
                    &format!("decoder/band/{b}"),
                    AttentionDims {
                        query_dim: embedder.out_dim(),
                        context_dim: d,
                        out_dim: config.feature_dim,
                        heads: config.cross_heads,
                        dim_head: config.cross_dim_head,
                        bias: false,
                    },
                );
                BandReader { embedder, attn }
            })
            .collect::<Vec<_>>();
        let head = Mlp::new(
            store,
            rng,
            "decoder/head",
            config.feature_dim * bands.len(),
            config.dim,
            config.depth_inr,
            config.channels,
            config.mlp_bias,
        );
        Ok(Self {
            config,
            lift,
            blocks,
            token_norm,
            bands,
            head,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Width of the concatenated local feature.
    pub fn feature_width(&self) -> usize {
        self.config.feature_dim * self.bands.len()
    }

    /// Validates (or wraps) query coordinates.
    pub fn prepare_queries(&self, coords: &[f64]) -> Result<Vec<f64>> {
        if !coords.len().is_multiple_of(self.config.spatial_dim) {
            return Err(Error::Shape(format!(
                "{} query coordinates do not divide into {}-d points",
                coords.len(),
                self.config.spatial_dim
            )));
        }
        if self.config.periodic_wrap {
            Ok(coords
                .iter()
                .map(|&x| {
                    let w = x - math::floor(x);
                    // x slightly below an integer can round up to exactly 1.0
                    if w >= 1.0 {
                        0.0
                    } else {
                        w
                    }
                })
                .collect())
        } else {
            check_domain(coords, self.config.spatial_dim)?;
            Ok(coords.to_vec())
        }
    }

    /// `Z' = SelfAttention^L(Lift(Z))`, `M x d`.
    pub fn lift_and_selfattend(&self, g: &mut Graph<'_>, z: Var) -> Var {
        let mut h = self.lift.forward(g, z);
        for block in &self.blocks {
            h = block.forward(g, h, SELF_ATTENTION_LABEL);
        }
        h
    }

    /// Per-band cross-attention of the queries onto `Z'`. Returns the
    /// concatenated `Q x (bands * feature_dim)` features and each band's nodes.
    pub fn query_features(&self, g: &mut Graph<'_>, z_prime: Var, coords: &[f64]) -> Result<(Var, Vec<BandVars>)> {
        let coords = self.prepare_queries(coords)?;
        let ctx = self.token_norm.forward(g, z_prime);
        let mut parts = Vec::with_capacity(self.bands.len());
        let mut vars = Vec::with_capacity(self.bands.len());
        for band in &self.bands {
            let q = g.input(band.embedder.embed(&coords));
            let a = band.attn.forward(g, q, ctx, ctx, BAND_LABEL);
            parts.push(a.out);
            vars.push(BandVars {
                features: a.out,
                weights: a.weights,
            });
        }
        let features = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts) };
        Ok((features, vars))
    }

    /// `u_hat = MLP(features)`, `Q x C`.
    pub fn decode_values(&self, g: &mut Graph<'_>, features: Var) -> Var {
        self.head.forward(g, features)
    }

    /// Full decode inside an existing graph.
    pub fn forward(&self, g: &mut Graph<'_>, z: Var, coords: &[f64]) -> Result<Var> {
        let z_prime = self.lift_and_selfattend(g, z);
        let (features, _) = self.query_features(g, z_prime, coords)?;
        Ok(self.decode_values(g, features))
    }

    /// Inference decode, evaluated in chunks of `chunk` queries. The token
    /// stack is computed once; chunking does not change the result because
    /// queries never interact.
    pub fn decode(&self, params: &ParamStore, z: &Tensor, coords: &[f64], chunk: usize) -> Result<Tensor> {
        if !z.all_finite() {
            return Err(Error::Shape("latent tokens are not finite".into()));
        }
        let dim = self.config.spatial_dim;
        let coords = self.prepare_queries(coords)?;
        let n = coords.len() / dim;
        let chunk = chunk.max(1);
        let mut g = Graph::inference(params);
        let zv = g.input(z.clone());
        let z_prime = self.lift_and_selfattend(&mut g, zv);
        let z_prime = g.value(z_prime).clone();
        let mut out = Vec::with_capacity(n * self.config.channels);
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let mut g = Graph::inference(params);
            let zp = g.input(z_prime.clone());
            let (features, _) = self.query_features(&mut g, zp, &coords[start * dim..(start + len) * dim])?;
            let u = self.decode_values(&mut g, features);
            out.extend_from_slice(g.value(u).data());
            start += len;
        }
        Ok(Tensor::from_vec(n, self.config.channels, out))
    }

    /// Decoder cross-attention weights of every band, laid out
    /// `[band][head][query][token]`.
    pub fn band_attention(&self, params: &ParamStore, z: &Tensor, coords: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference(params);
        let zv = g.input(z.clone());
        let z_prime = self.lift_and_selfattend(&mut g, zv);
        let (_, bands) = self.query_features(&mut g, z_prime, coords)?;
        Ok(bands
            .iter()
            .map(|b| g.attention_probs(b.weights).map(|p| p.to_vec()).unwrap_or_default())
            .collect())
    }
}
