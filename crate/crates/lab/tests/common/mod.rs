#![allow(dead_code)]

use aroma_core::fourier::BandSpec;
use aroma_core::refiner::DitConfig;
use aroma_core::{DecoderConfig, EncoderConfig, RefinerConfig};
use aroma_lab::dataset::TrajectoryDataset;
use aroma_lab::generate::{generate, GenerateConfig};
use aroma_lab::model::AutoencoderSpec;
use aroma_lab::training::{AeTrainConfig, RefinerTrainConfig};
use serde_json::json;

pub fn tiny_burgers(n_time: usize, n_train: usize, n_test: usize, keep_fraction: f64) -> TrajectoryDataset {
    let flat = json!({
        "n_time": n_time,
        "n_train": n_train,
        "n_test": n_test,
        "keep_fraction": keep_fraction,
        "seed": 7,
    });
    generate(&GenerateConfig::from_flat("burgers", &flat).unwrap()).unwrap()
}

pub fn tiny_spec() -> AutoencoderSpec {
    AutoencoderSpec {
        encoder: EncoderConfig {
            hidden_dim: 16,
            num_latents: 8,
            latent_dim: 4,
            cross_heads: 2,
            cross_dim_head: 8,
            num_frequencies: 4,
            ..EncoderConfig::default()
        },
        decoder: DecoderConfig {
            latent_dim: 4,
            hidden_dim: 16,
            num_self_attentions: 1,
            self_heads: 2,
            self_dim_head: 8,
            cross_heads: 2,
            cross_dim_head: 8,
            bands: BandSpec::new(vec![3, 4], 4),
            feature_dim: 8,
            dim: 16,
            depth_inr: 1,
            ..DecoderConfig::default()
        },
    }
}

pub fn tiny_ae_config(epochs: usize) -> AeTrainConfig {
    AeTrainConfig {
        epochs,
        batch_size: 4,
        eval_every: 1,
        validation_frames: 4,
        samples_per_epoch: Some(8),
        model: Some(tiny_spec()),
        ..AeTrainConfig::default()
    }
}

pub fn tiny_refiner_config(epochs: usize) -> RefinerTrainConfig {
    RefinerTrainConfig {
        epochs,
        batch_size: 4,
        eval_every: 1,
        validation_pairs: 4,
        samples_per_epoch: Some(8),
        refiner: RefinerConfig {
            dit: DitConfig {
                hidden: 16,
                depth: 1,
                heads: 2,
                step_features: 8,
                ..DitConfig::default()
            },
            mlp_width: 16,
            mlp_depth: 1,
            ..RefinerConfig::default()
        },
        ..RefinerTrainConfig::default()
    }
}
