//! Encoder and decoder trained together as one autoencoder.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{EncodeMode, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::field::{FieldSnapshot, LatentTokens};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Regularization {
    /// Sampled latents with a KL penalty.
    Vae,
    /// Deterministic latents; weight decay does the regularizing.
    L2Ae,
}

impl Regularization {
    pub fn name(self) -> &'static str {
        match self {
            Regularization::Vae => "vae",
            Regularization::L2Ae => "l2-ae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(Regularization::Vae),
            "l2-ae" | "l2ae" | "ae" => Ok(Regularization::L2Ae),
            other => Err(Error::Config(alloc::format!("unknown regularization {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoEncoder {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Loss nodes of one sample.
#[derive(Clone, Copy, Debug)]
pub struct AeLoss {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

impl AutoEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        encoder: EncoderConfig,
        decoder: DecoderConfig,
    ) -> Result<Self> {
        if encoder.latent_dim != decoder.latent_dim
            || encoder.spatial_dim != decoder.spatial_dim
            || encoder.channels != decoder.channels
        {
            return Err(Error::Config(
                "encoder and decoder disagree on latent width, spatial dimension or channels".into(),
            ));
        }
        let encoder = Encoder::new(store, rng, encoder);
        let decoder = Decoder::new(store, rng, decoder)?;
        Ok(Self { encoder, decoder })
    }

    /// `MSE(u, u_hat) + beta * KL` for one sample. The encoder sees `input`;
    /// the decoder is queried at `query_coords` and compared with
    /// `target` (`Q x C`).
    #[allow(clippy::too_many_arguments)]
    pub fn loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        input: &FieldSnapshot,
        query_coords: &[f64],
        target: &Tensor,
        kl_weight: f64,
        mode: Regularization,
        rng: &mut R,
    ) -> Result<AeLoss> {
        let enc_mode = match mode {
            Regularization::Vae => EncodeMode::Train,
            Regularization::L2Ae => EncodeMode::Eval,
        };
        let vars = self.encoder.forward(g, input, enc_mode, rng)?;
        let u_hat = self.decoder.forward(g, vars.z, query_coords)?;
        let recon = g.mse_to(u_hat, target.clone());
        let kl = g.kl_std_normal(vars.mu, vars.log_sigma);
        let total = match mode {
            Regularization::Vae if kl_weight > 0.0 => {
                let weighted = g.scale(kl, kl_weight);
                g.add(recon, weighted)
            }
            _ => recon,
        };
        Ok(AeLoss { total, recon, kl })
    }

    pub fn encode(&self, params: &ParamStore, snapshot: &FieldSnapshot) -> Result<LatentTokens> {
        self.encoder.encode(params, snapshot)
    }

    pub fn decode(&self, params: &ParamStore, z: &Tensor, coords: &[f64]) -> Result<Tensor> {
        self.decoder.decode(params, z, coords, 1024)
    }

    /// Eval-mode encode followed by decoding at the same points.
    pub fn reconstruct(&self, params: &ParamStore, snapshot: &FieldSnapshot) -> Result<Tensor> {
        let z = self.encode(params, snapshot)?;
        self.decode(params, &z.z, snapshot.coords())
    }
}
