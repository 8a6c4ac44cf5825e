//! Building blocks shared by the encoder, decoder and latent steppers.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Affine map `x W + b`, weight stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.insert(
            format!("{name}/weight"),
            uniform_init(rng, in_dim, out_dim, in_dim),
        );
        let bias = bias.then(|| store.insert(format!("{name}/bias"), Tensor::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Zero-initialised weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = store.insert(format!("{name}/weight"), Tensor::zeros(in_dim, out_dim));
        let bias = bias.then(|| store.insert(format!("{name}/bias"), Tensor::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::from([self.weight]);
        v.extend(self.bias);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, affine: bool) -> Self {
        if affine {
            Self {
                gamma: Some(store.insert(format!("{name}/gamma"), Tensor::filled(1, dim, 1.0))),
                beta: Some(store.insert(format!("{name}/beta"), Tensor::zeros(1, dim))),
            }
        } else {
            Self {
                gamma: None,
                beta: None,
            }
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let gamma = self.gamma.map(|p| g.param(p));
        let beta = self.beta.map(|p| g.param(p));
        g.layer_norm(x, gamma, beta)
    }
}

/// Pre-norm position-wise feed-forward network: `W2 gelu(W1 LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}/norm"), dim, true),
            fc1: Linear::new(store, rng, &format!("{name}/fc1"), dim, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}/fc2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.norm.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head attention with separate query/key/value projections and an
/// output projection. Queries and keys/values may come from different
/// sequences with different widths.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub heads: usize,
    pub dim_head: usize,
}

/// Output of an attention layer plus the raw attention node, whose softmax
/// weights can be read back with [`Graph::attention_probs`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
}

pub struct AttentionDims {
    pub query_dim: usize,
    pub context_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub dim_head: usize,
    pub bias: bool,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dims: AttentionDims) -> Self {
        let inner = dims.heads * dims.dim_head;
        Self {
            to_q: Linear::new(store, rng, &format!("{name}/q"), dims.query_dim, inner, dims.bias),
            to_k: Linear::new(store, rng, &format!("{name}/k"), dims.context_dim, inner, dims.bias),
            to_v: Linear::new(store, rng, &format!("{name}/v"), dims.context_dim, inner, dims.bias),
            to_out: Linear::new(store, rng, &format!("{name}/out"), inner, dims.out_dim, dims.bias),
            heads: dims.heads,
            dim_head: dims.dim_head,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        query: Var,
        key_src: Var,
        value_src: Var,
        label: &'static str,
    ) -> AttentionOutput {
        let q = self.to_q.forward(g, query);
        let k = self.to_k.forward(g, key_src);
        let v = self.to_v.forward(g, value_src);
        let weights = g.attention(q, k, v, self.heads, label);
        let out = self.to_out.forward(g, weights);
        AttentionOutput { out, weights }
    }
}

/// Pre-norm self-attention block:
/// `Z += Attn(LN(Z))`, then `Z += FFN(LN(Z))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttentionBlock {
    pub norm: LayerNorm,
    pub attn: Attention,
    pub ffn: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        dim_head: usize,
        ffn_hidden: usize,
    ) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}/norm"), dim, true),
            attn: Attention::new(
                store,
                rng,
                &format!("{name}/attn"),
                AttentionDims {
                    query_dim: dim,
                    context_dim: dim,
                    out_dim: dim,
                    heads,
                    dim_head,
                    bias: false,
                },
            ),
            ffn: FeedForward::new(store, rng, &format!("{name}/ffn"), dim, ffn_hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, label: &'static str) -> Var {
        let h = self.norm.forward(g, x);
        let a = self.attn.forward(g, h, h, h, label);
        let x = g.add(x, a.out);
        let f = self.ffn.forward(g, x);
        g.add(x, f)
    }
}

/// Plain GELU multilayer perceptron: `hidden_layers` layers of width
/// `width` followed by a linear read-out.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        width: usize,
        hidden_layers: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut d = in_dim;
        for i in 0..hidden_layers {
            layers.push(Linear::new(store, rng, &format!("{name}/{i}"), d, width, bias));
            d = width;
        }
        layers.push(Linear::new(store, rng, &format!("{name}/out"), d, out_dim, bias));
        Self { layers }
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i < last {
                h = g.gelu(h);
            }
        }
        h
    }
}
