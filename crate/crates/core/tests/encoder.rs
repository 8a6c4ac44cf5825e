mod common;

use aroma_core::encoder::{sequence_dropout, EncodeMode, Encoder, EncoderConfig, GEOMETRY_LABEL, OBSERVATION_LABEL};
use aroma_core::{Error, FieldSnapshot, Graph, ParamStore, Tensor};
use common::{max_relative_grad_error, rng};
use rand::seq::SliceRandom;
use rand::Rng;

fn small_config(spatial_dim: usize, encode_geo: bool) -> EncoderConfig {
    EncoderConfig {
        spatial_dim,
        channels: 1,
        hidden_dim: 16,
        num_latents: 4,
        latent_dim: 3,
        cross_heads: 2,
        cross_dim_head: 8,
        num_frequencies: 6,
        encode_geo,
        ..EncoderConfig::default()
    }
}

fn random_snapshot(seed: u64, n: usize, dim: usize) -> FieldSnapshot {
    let mut r = rng(seed);
    let coords: Vec<f64> = (0..n * dim).map(|_| r.random_range(0.0..1.0)).collect();
    let values: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    FieldSnapshot::new(coords, values, dim, 1).unwrap()
}

fn build(cfg: EncoderConfig, seed: u64) -> (ParamStore, Encoder) {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng(seed), cfg);
    (store, enc)
}

#[test]
fn output_shape_is_fixed_for_any_point_count() {
    let (store, enc) = build(small_config(2, true), 1);
    for n in [37, 100, 1024, 4096] {
        let z = enc.encode(&store, &random_snapshot(n as u64, n, 2)).unwrap();
        assert_eq!(z.z.shape(), (4, 3), "N = {n}");
        assert!(z.is_finite());
    }
}

#[test]
fn permuting_points_leaves_mean_tokens_unchanged() {
    let (store, enc) = build(small_config(2, true), 2);
    let snap = random_snapshot(7, 300, 2);
    let mut perm: Vec<usize> = (0..snap.len()).collect();
    perm.shuffle(&mut rng(11));
    let a = enc.encode(&store, &snap).unwrap().mu;
    let b = enc.encode(&store, &snap.select(&perm)).unwrap().mu;
    let diff = a.zip_map(&b, |x, y| (x - y).abs()).max_abs();
    assert!(diff < 1e-5 * a.max_abs(), "diff {diff}");
}

#[test]
fn duplicating_every_point_leaves_tokens_unchanged() {
    let (store, enc) = build(small_config(1, true), 3);
    let snap = random_snapshot(5, 50, 1);
    let idx: Vec<usize> = (0..50).flat_map(|i| [i, i]).collect();
    let a = enc.encode(&store, &snap).unwrap().mu;
    let b = enc.encode(&store, &snap.select(&idx)).unwrap().mu;
    assert!(a.zip_map(&b, |x, y| x - y).max_abs() < 1e-5);
}

#[test]
fn geometry_tokens_ignore_values() {
    let (store, enc) = build(small_config(2, true), 4);
    let snap = random_snapshot(9, 64, 2);
    let other = snap.with_values(snap.values().iter().map(|v| v * -3.0 + 0.5).collect()).unwrap();
    let geo = |s: &FieldSnapshot| {
        let mut g = Graph::inference(&store);
        let v = enc.forward(&mut g, s, EncodeMode::Eval, &mut rng(0)).unwrap();
        g.value(v.t_geo).clone()
    };
    assert_eq!(geo(&snap), geo(&other));
}

#[test]
fn geometry_pass_is_skipped_when_disabled() {
    let (store, enc) = build(small_config(1, false), 5);
    let mut g = Graph::inference(&store);
    let v = enc.forward(&mut g, &random_snapshot(1, 20, 1), EncodeMode::Eval, &mut rng(0)).unwrap();
    assert_eq!(g.value(v.t_geo), store.get(enc.queries));
}

#[test]
fn zero_values_without_bias_give_zero_attention_output() {
    let cfg = EncoderConfig {
        value_bias: false,
        ..small_config(1, false)
    };
    let (store, enc) = build(cfg, 6);
    let snap = FieldSnapshot::new(vec![0.1, 0.4, 0.7], vec![0.0; 3], 1, 1).unwrap();
    let mut g = Graph::inference(&store);
    let (gamma, v) = enc.embed(&mut g, &snap).unwrap();
    assert_eq!(g.value(v).max_abs(), 0.0);
    let (t_geo, _) = enc.encode_geometry(&mut g, gamma);
    let (t_obs, w) = enc.encode_observations(&mut g, t_geo, gamma, v).unwrap();
    assert_eq!(g.value(w).max_abs(), 0.0);
    // T_obs = T_geo + FFN(0)
    let zero = g.input(Tensor::zeros(4, 16));
    let ffn0 = enc.observation.ffn.forward(&mut g, zero);
    let expected = g.add(t_geo, ffn0);
    assert!(g.value(t_obs).zip_map(g.value(expected), |a, b| a - b).max_abs() < 1e-12);
}

#[test]
fn origin_embeds_to_alternating_pattern() {
    let (_, enc) = build(small_config(1, false), 7);
    let ff = enc.embedder().embed(&[0.0]);
    for (i, v) in ff.data().iter().enumerate() {
        assert_eq!(*v, if i % 2 == 0 { 1.0 } else { 0.0 });
    }
}

#[test]
fn score_matrices_are_tokens_by_points() {
    for (m, n, geo) in [(4, 37, true), (8, 200, false), (2, 1000, true)] {
        let cfg = EncoderConfig {
            num_latents: m,
            ..small_config(1, geo)
        };
        let (store, enc) = build(cfg, 8);
        let mut g = Graph::inference(&store);
        enc.forward(&mut g, &random_snapshot(3, n, 1), EncodeMode::Eval, &mut rng(0)).unwrap();
        let total: usize = g.attention_records().iter().map(|r| r.score_elements()).sum();
        let expected = if geo { 2 * m * n } else { m * n };
        assert_eq!(total, expected);
        for r in g.attention_records() {
            assert!(r.label == GEOMETRY_LABEL || r.label == OBSERVATION_LABEL);
            assert_eq!((r.query_rows, r.key_rows), (m, n));
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let (store, enc) = build(small_config(2, true), 9);
    let mut g = Graph::inference(&store);
    let v = enc.forward(&mut g, &random_snapshot(4, 77, 2), EncodeMode::Eval, &mut rng(0)).unwrap();
    for w in [v.geometry_attention.unwrap(), v.observation_attention] {
        let probs = g.attention_probs(w).unwrap();
        for row in probs.chunks(77) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn eval_mode_returns_the_mean_and_train_mode_is_seeded() {
    let (store, enc) = build(small_config(1, false), 10);
    let snap = random_snapshot(2, 30, 1);
    let e = enc.encode(&store, &snap).unwrap();
    assert_eq!(e.z, e.mu);
    let a = enc.encode_sample(&store, &snap, &mut rng(3)).unwrap();
    let b = enc.encode_sample(&store, &snap, &mut rng(3)).unwrap();
    let c = enc.encode_sample(&store, &snap, &mut rng(4)).unwrap();
    assert_eq!(a.z, b.z);
    assert_ne!(a.z, c.z);
}

#[test]
fn very_negative_log_sigma_collapses_to_the_mean() {
    let (mut store, enc) = build(small_config(1, false), 11);
    let bias = enc.to_log_sigma.bias.unwrap();
    store.get_mut(enc.to_log_sigma.weight).fill(0.0);
    store.get_mut(bias).fill(-1e6);
    let snap = random_snapshot(2, 30, 1);
    let s = enc.encode_sample(&store, &snap, &mut rng(5)).unwrap();
    assert!(s.log_sigma.data().iter().all(|&l| l == -10.0));
    assert!(s.z.zip_map(&s.mu, |a, b| a - b).max_abs() < 1e-3);
}

#[test]
fn empty_and_out_of_domain_inputs_are_rejected() {
    let (store, enc) = build(small_config(1, false), 12);
    let empty = FieldSnapshot::new(vec![], vec![], 1, 1).unwrap();
    assert!(matches!(enc.encode(&store, &empty), Err(Error::EmptyObservationSet)));
    assert!(matches!(
        FieldSnapshot::new(vec![1.0], vec![0.0], 1, 1),
        Err(Error::Domain { .. })
    ));
}

#[test]
fn sequence_dropout_keeps_the_expected_count() {
    let snap = random_snapshot(1, 100, 1);
    let kept = sequence_dropout(&snap, 0.1, &mut rng(0)).unwrap();
    assert_eq!(kept.len(), 90);
    assert_eq!(sequence_dropout(&snap, 0.0, &mut rng(0)).unwrap(), snap);
    assert!(matches!(sequence_dropout(&snap, 1.0, &mut rng(0)), Err(Error::InvalidRatio(_))));
}

#[test]
fn gradient_of_squared_mean_matches_finite_differences() {
    let cfg = EncoderConfig {
        spatial_dim: 1,
        channels: 1,
        hidden_dim: 8,
        num_latents: 2,
        latent_dim: 2,
        cross_heads: 2,
        cross_dim_head: 4,
        num_frequencies: 3,
        encode_geo: true,
        ffn_mult: 2,
        ..EncoderConfig::default()
    };
    let (store, enc) = build(cfg, 13);
    let snap = random_snapshot(21, 5, 1);
    let loss = |p: &ParamStore| {
        let mut g = Graph::new(p);
        let v = enc.forward(&mut g, &snap, EncodeMode::Eval, &mut rng(0)).unwrap();
        let sq = g.mul(v.mu, v.mu);
        let l = g.sum(sq);
        (g.value(l).get(0, 0), g.backward(l))
    };
    let (_, grads) = loss(&store);
    let err = max_relative_grad_error(&store, &grads, |p| loss(p).0);
    assert!(err < 1e-4, "relative error {err}");
}
