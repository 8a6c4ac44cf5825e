mod common;

use aroma_core::decoder::{Decoder, DecoderConfig, BAND_LABEL};
use aroma_core::encoder::EncoderConfig;
use aroma_core::fourier::BandSpec;
use aroma_core::{AutoEncoder, Error, FieldSnapshot, Graph, ParamStore, Regularization, Tensor};
use common::{max_relative_grad_error, random_tensor, rng};
use rand::Rng;

fn small(spatial_dim: usize, bands: Vec<u32>) -> DecoderConfig {
    DecoderConfig {
        spatial_dim,
        channels: 1,
        latent_dim: 3,
        hidden_dim: 16,
        num_self_attentions: 1,
        self_heads: 2,
        self_dim_head: 8,
        cross_heads: 2,
        cross_dim_head: 8,
        bands: BandSpec::new(bands, 6),
        feature_dim: 4,
        dim: 12,
        depth_inr: 2,
        ffn_mult: 2,
        ..DecoderConfig::default()
    }
}

fn build(cfg: DecoderConfig, seed: u64) -> (ParamStore, Decoder) {
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, &mut rng(seed), cfg).unwrap();
    (store, dec)
}

#[test]
fn decoding_a_subset_equals_restricting_the_full_decode() {
    let (store, dec) = build(small(1, vec![2, 3]), 1);
    let z = random_tensor(&mut rng(2), 4, 3);
    let grid: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
    let sub: Vec<f64> = grid.iter().step_by(2).copied().collect();
    let full = dec.decode(&store, &z, &grid, 1024).unwrap();
    let part = dec.decode(&store, &z, &sub, 1024).unwrap();
    for (i, v) in part.data().iter().enumerate() {
        assert_eq!(*v, full.get(2 * i, 0));
    }
    // chunking does not change values either
    assert_eq!(dec.decode(&store, &z, &grid, 7).unwrap(), full);
}

#[test]
fn band_features_concatenate_in_ascending_order() {
    let cfg = DecoderConfig {
        feature_dim: 16,
        ..small(2, vec![2, 3])
    };
    let (store, dec) = build(cfg, 3);
    assert_eq!(dec.feature_width(), 32);
    let freqs: Vec<f64> = dec.bands.iter().map(|b| b.embedder.frequencies()[0]).collect();
    assert_eq!(freqs, vec![1.0, 4.0]);
    let mut g = Graph::inference(&store);
    let z = g.input(random_tensor(&mut rng(1), 4, 3));
    let zp = dec.lift_and_selfattend(&mut g, z);
    let (f, bands) = dec.query_features(&mut g, zp, &[0.3, 0.6, 0.1, 0.2]).unwrap();
    assert_eq!(g.value(f).shape(), (2, 32));
    assert_eq!(g.value(f).slice_rows(0, 1).data()[..16], g.value(bands[0].features).data()[..16]);
}

#[test]
fn wrapped_queries_are_periodic() {
    let cfg = DecoderConfig {
        periodic_wrap: true,
        ..small(1, vec![2, 3])
    };
    let (store, dec) = build(cfg, 4);
    let z = random_tensor(&mut rng(5), 4, 3);
    let xs = [0.0, 0.25, 0.5, 0.75];
    let shifted: Vec<f64> = xs.iter().map(|x| x + 1.0).collect();
    let a = dec.decode(&store, &z, &xs, 64).unwrap();
    let b = dec.decode(&store, &z, &shifted, 64).unwrap();
    assert!(a.zip_map(&b, |x, y| x - y).max_abs() < 1e-12);

    let strict = build(small(1, vec![2, 3]), 4).1;
    assert!(matches!(strict.prepare_queries(&[1.0]), Err(Error::Domain { .. })));
}

#[test]
fn zeroed_residual_branches_reduce_to_the_lift() {
    let (mut store, dec) = build(small(1, vec![2]), 6);
    for block in &dec.blocks {
        store.get_mut(block.attn.to_out.weight).fill(0.0);
        store.get_mut(block.ffn.fc2.weight).fill(0.0);
        store.get_mut(block.ffn.fc2.bias.unwrap()).fill(0.0);
    }
    let z = random_tensor(&mut rng(7), 4, 3);
    let mut g = Graph::inference(&store);
    let zv = g.input(z);
    let lifted = dec.lift.forward(&mut g, zv);
    let zp = dec.lift_and_selfattend(&mut g, zv);
    assert_eq!(g.value(lifted), g.value(zp));
}

#[test]
fn zero_features_through_bias_free_head_give_zero() {
    let cfg = DecoderConfig {
        mlp_bias: false,
        ..small(1, vec![2])
    };
    let (store, dec) = build(cfg, 8);
    assert_eq!(dec.head.hidden_layers(), 2);
    let mut g = Graph::inference(&store);
    let f = g.input(Tensor::zeros(5, dec.feature_width()));
    let u = dec.decode_values(&mut g, f);
    assert_eq!(g.value(u).max_abs(), 0.0);
}

#[test]
fn query_cost_is_queries_times_tokens_per_band() {
    for (m, q, bands) in [(4, 10, vec![2]), (8, 33, vec![2, 3]), (16, 100, vec![3, 4, 5])] {
        let nb = bands.len();
        let (store, dec) = build(small(1, bands), 9);
        let z = random_tensor(&mut rng(1), m, 3);
        let coords: Vec<f64> = (0..q).map(|i| i as f64 / q as f64).collect();
        let mut g = Graph::inference(&store);
        let zv = g.input(z);
        dec.forward(&mut g, zv, &coords).unwrap();
        let band: Vec<_> = g.attention_records().iter().filter(|r| r.label == BAND_LABEL).collect();
        assert_eq!(band.len(), nb);
        assert!(band.iter().all(|r| r.score_elements() == q * m));
    }
}

#[test]
fn decreasing_bands_are_rejected() {
    let mut store = ParamStore::new();
    assert!(Decoder::new(&mut store, &mut rng(0), small(1, vec![3, 2])).is_err());
}

#[test]
fn full_pipeline_gradient_matches_finite_differences() {
    let enc = EncoderConfig {
        spatial_dim: 1,
        channels: 1,
        hidden_dim: 8,
        num_latents: 2,
        latent_dim: 2,
        cross_heads: 2,
        cross_dim_head: 4,
        num_frequencies: 3,
        encode_geo: false,
        ffn_mult: 2,
        ..EncoderConfig::default()
    };
    let dec = DecoderConfig {
        spatial_dim: 1,
        channels: 1,
        latent_dim: 2,
        hidden_dim: 8,
        num_self_attentions: 1,
        self_heads: 2,
        self_dim_head: 4,
        cross_heads: 2,
        cross_dim_head: 4,
        bands: BandSpec::new(vec![1, 2], 3),
        feature_dim: 3,
        dim: 8,
        depth_inr: 1,
        ffn_mult: 2,
        ..DecoderConfig::default()
    };
    let mut store = ParamStore::new();
    let ae = AutoEncoder::new(&mut store, &mut rng(3), enc, dec).unwrap();
    let total: usize = store.iter().map(|(_, _, t)| t.len()).sum();
    assert!(total <= 2000, "{total} parameters");
    let mut r = rng(4);
    let coords: Vec<f64> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();
    let values: Vec<f64> = coords.iter().map(|x| (6.0 * x).sin()).collect();
    let snap = FieldSnapshot::new(coords.clone(), values.clone(), 1, 1).unwrap();
    let target = Tensor::from_vec(6, 1, values);
    let loss = |p: &ParamStore| {
        let mut g = Graph::new(p);
        // fixed noise draw so the sampled path is differentiable and repeatable
        let l = ae
            .loss(&mut g, &snap, &coords, &target, 0.1, Regularization::Vae, &mut rng(9))
            .unwrap();
        (g.value(l.total).get(0, 0), g.backward(l.total))
    };
    let (_, grads) = loss(&store);
    let err = max_relative_grad_error(&store, &grads, |p| loss(p).0);
    assert!(err < 1e-4, "relative error {err}");
}
