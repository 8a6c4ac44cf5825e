//! Architecture presets and the bundle of weights plus modules that a
//! checkpoint restores.

use std::path::Path;

use aroma_core::fourier::BandSpec;
use aroma_core::refiner::DitConfig;
use aroma_core::{AutoEncoder, DecoderConfig, EncoderConfig, ParamStore, Refiner, RefinerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::dataset::NormStats;
use crate::error::{LabError, LabResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderSpec {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        Self::burgers()
    }
}

impl AutoencoderSpec {
    /// 1-d preset: 32 tokens of width 8, no geometry pass, bands 3/4/5.
    pub fn burgers() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }

    /// 2-d preset: 32 tokens of width 16, geometry pass on, bands 2/3.
    pub fn ns2d() -> Self {
        let encoder = EncoderConfig {
            spatial_dim: 2,
            latent_dim: 16,
            encode_geo: true,
            ..EncoderConfig::default()
        };
        let decoder = DecoderConfig {
            spatial_dim: 2,
            latent_dim: 16,
            bands: BandSpec::new(vec![2, 3], 16),
            ..DecoderConfig::default()
        };
        Self { encoder, decoder }
    }

    pub fn for_equation(equation: &str) -> Self {
        match equation {
            "ns2d" => Self::ns2d(),
            _ => Self::burgers(),
        }
    }

    /// Forces the data-dependent widths to agree with a dataset.
    pub fn fit_data(&mut self, spatial_dim: usize, channels: usize) {
        self.encoder.spatial_dim = spatial_dim;
        self.decoder.spatial_dim = spatial_dim;
        self.encoder.channels = channels;
        self.decoder.channels = channels;
        self.decoder.latent_dim = self.encoder.latent_dim;
    }
}

/// Stepper preset matched to an autoencoder's token grid.
pub fn refiner_for(spec: &AutoencoderSpec, base: &RefinerConfig) -> RefinerConfig {
    RefinerConfig {
        dit: DitConfig {
            num_tokens: spec.encoder.num_latents,
            latent_dim: spec.encoder.latent_dim,
            ..base.dit.clone()
        },
        ..base.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub equation: String,
    pub autoencoder: AutoencoderSpec,
    pub refiner: Option<RefinerConfig>,
    pub normalization: NormStats,
    /// Seed of the autoencoder initialization, so init weights can be rebuilt.
    #[serde(default)]
    pub init_seed: u64,
}

/// Weights plus the modules that index into them.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub autoencoder: AutoEncoder,
    pub refiner: Option<Refiner>,
}

pub const ENCODER_PREFIX: &str = "encoder/";
pub const DECODER_PREFIX: &str = "decoder/";
pub const REFINER_PREFIX: &str = "refiner/";

impl Model {
    pub fn new(equation: &str, autoencoder: AutoencoderSpec, normalization: NormStats, seed: u64) -> LabResult<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ae = AutoEncoder::new(&mut store, &mut rng, autoencoder.encoder.clone(), autoencoder.decoder.clone())?;
        Ok(Self {
            spec: ModelSpec {
                equation: equation.into(),
                autoencoder,
                refiner: None,
                normalization,
                init_seed: seed,
            },
            store,
            autoencoder: ae,
            refiner: None,
        })
    }

    /// Adds freshly initialized stepper weights.
    pub fn attach_refiner(&mut self, config: RefinerConfig, seed: u64) -> LabResult<()> {
        if self.refiner.is_some() {
            return Err(LabError::Config("model already has a refiner".into()));
        }
        let config = refiner_for(&self.spec.autoencoder, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.refiner = Some(Refiner::new(&mut self.store, &mut rng, config.clone())?);
        self.spec.refiner = Some(config);
        Ok(())
    }

    pub fn refiner(&self) -> LabResult<&Refiner> {
        self.refiner
            .as_ref()
            .ok_or_else(|| LabError::Config("checkpoint has no refiner weights".into()))
    }

    pub fn checkpoint(&self, run: Value, metadata: Value) -> Checkpoint {
        let config = json!({ "model": self.spec, "run": run });
        Checkpoint::from_store(&self.store, config, metadata)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> LabResult<Self> {
        let spec: ModelSpec = serde_json::from_value(ck.manifest.config["model"].clone())
            .map_err(|e| LabError::Format(format!("checkpoint model spec: {e}")))?;
        let mut model = Self::new(&spec.equation, spec.autoencoder.clone(), spec.normalization.clone(), spec.init_seed)?;
        if let Some(r) = &spec.refiner {
            model.attach_refiner(r.clone(), 0)?;
        }
        ck.load_into(&mut model.store)?;
        model.spec = spec;
        Ok(model)
    }

    pub fn load(dir: &Path) -> LabResult<Self> {
        Self::from_checkpoint(&Checkpoint::read(dir)?)
    }

    /// Fresh autoencoder with the weights this model started from.
    pub fn initial(&self) -> LabResult<Self> {
        let s = &self.spec;
        Self::new(&s.equation, s.autoencoder.clone(), s.normalization.clone(), s.init_seed)
    }

    pub fn parameter_count(&self, prefix: &str) -> usize {
        self.store.scalar_count(prefix)
    }
}
