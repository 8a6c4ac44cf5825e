mod common;

use aroma_core::refiner::{
    build_schedule, denoise_from, reconstruct, sample_next, vpredict_target, Dit, DitConfig, LatentScaler,
    NoiseSchedule, VelocityModel,
};
use aroma_core::{Error, Graph, ParamStore, Refiner, RefinerConfig, Result, StepperKind, Tensor};
use common::{max_relative_grad_error, random_tensor, rng};
use rand::Rng;

#[test]
fn schedule_endpoints_and_orientation() {
    let s = build_schedule(3, 1e-2).unwrap();
    assert_eq!(s.alpha_bars().len(), 4);
    assert!((s.alpha_bar(0) - (1.0 - 1e-4)).abs() < 1e-15);
    assert_eq!(s.alpha_bar(3), 0.0);
    for k in 0..3 {
        assert!(s.alpha_bar(k) > s.alpha_bar(k + 1));
    }
    let one = build_schedule(1, 0.05).unwrap();
    assert_eq!(one.alpha_bars(), &[1.0 - 0.05 * 0.05, 0.0][..]);
}

#[test]
fn schedule_noise_fractions_for_small_floor() {
    // sigma_min^(2 (K - k) / K) with sigma_min = 1e-3, K = 3
    let s = build_schedule(3, 1e-3).unwrap();
    let expected = [1e-6, 1e-4, 1e-2, 1.0];
    for (k, e) in expected.iter().enumerate() {
        assert!((s.noise_fraction(k) - e).abs() < 1e-9 * e, "k = {k}");
    }
}

#[test]
fn invalid_schedules_are_rejected() {
    for (k, s) in [(0, 0.01), (3, 0.0), (3, 1.0), (3, -0.5), (3, f64::NAN)] {
        assert!(matches!(build_schedule(k, s), Err(Error::InvalidSchedule(_))));
    }
}

#[test]
fn velocity_limits_and_reconstruction() {
    let mut r = rng(1);
    let z0 = random_tensor(&mut r, 5, 3);
    let eps = random_tensor(&mut r, 5, 3);
    let (zk, v) = vpredict_target(&z0, &eps, 1.0);
    assert_eq!((zk.clone(), v), (z0.clone(), eps.clone()));
    let (zk, v) = vpredict_target(&z0, &eps, 0.0);
    assert_eq!(zk, eps);
    assert_eq!(v, z0.map(|x| -x));
    let (zk, v) = vpredict_target(&z0, &eps, 0.64);
    let (z0r, epsr) = reconstruct(&zk, &v, 0.64);
    assert!(z0r.zip_map(&z0, |a, b| a - b).max_abs() < 1e-6);
    assert!(epsr.zip_map(&eps, |a, b| a - b).max_abs() < 1e-6);
}

struct Oracle {
    z0: Tensor,
    schedule: NoiseSchedule,
}

impl VelocityModel for Oracle {
    fn velocity(&self, _cond: &Tensor, noisy: &Tensor, k: usize) -> Result<Tensor> {
        let (a, s) = self.schedule.coefficients(k);
        let eps = noisy.zip_map(&self.z0, |z, x| (z - a * x) / s);
        Ok(eps.zip_map(&self.z0, |e, x| a * e - s * x))
    }
}

#[test]
fn oracle_velocity_makes_the_sampler_exact() {
    for (k, sigma) in [(1, 1e-2), (3, 1e-2), (3, 1e-3), (10, 0.1)] {
        let schedule = build_schedule(k, sigma).unwrap();
        let z0 = random_tensor(&mut rng(k as u64), 4, 2);
        let oracle = Oracle {
            z0: z0.clone(),
            schedule: schedule.clone(),
        };
        let cond = Tensor::zeros(4, 2);
        let out = sample_next(&oracle, &cond, &schedule, &mut rng(99)).unwrap();
        assert!(out.zip_map(&z0, |a, b| a - b).max_abs() < 1e-5, "K = {k}");
    }
}

#[test]
fn sampler_is_seeded() {
    let schedule = build_schedule(3, 1e-2).unwrap();
    struct Shrink;
    impl VelocityModel for Shrink {
        fn velocity(&self, _c: &Tensor, z: &Tensor, _k: usize) -> Result<Tensor> {
            Ok(z.map(|x| 0.5 * x))
        }
    }
    let cond = Tensor::zeros(3, 2);
    let a = sample_next(&Shrink, &cond, &schedule, &mut rng(1)).unwrap();
    let b = sample_next(&Shrink, &cond, &schedule, &mut rng(1)).unwrap();
    let c = sample_next(&Shrink, &cond, &schedule, &mut rng(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let init = Tensor::filled(3, 2, 0.3);
    assert_eq!(
        denoise_from(&Shrink, &cond, init.clone(), &schedule).unwrap(),
        denoise_from(&Shrink, &cond, init, &schedule).unwrap()
    );
}

fn tiny_dit(hidden: usize, depth: usize) -> DitConfig {
    DitConfig {
        num_tokens: 3,
        latent_dim: 2,
        hidden,
        depth,
        heads: 2,
        mlp_ratio: 2.0,
        step_features: 4,
    }
}

#[test]
fn blocks_are_identity_and_head_is_zero_at_init() {
    let mut store = ParamStore::new();
    let dit = Dit::new(&mut store, &mut rng(3), "refiner", tiny_dit(16, 3)).unwrap();
    let mut r = rng(4);
    let cond = random_tensor(&mut r, 3, 2);
    let noisy = random_tensor(&mut r, 3, 2);
    let mut g = Graph::inference(&store);
    let (c, t) = (g.input(cond.clone()), g.input(noisy.clone()));
    let x0 = dit.embed_sequence(&mut g, c, t);
    let step = dit.step_embedding(&mut g, 2.0);
    let act = g.silu(step);
    let mut x = x0;
    for b in &dit.blocks {
        x = b.forward(&mut g, x, act);
    }
    assert_eq!(g.value(x), g.value(x0));
    let out = dit.predict(&store, &cond, &noisy, 2.0).unwrap();
    assert_eq!(out, Tensor::zeros(3, 2));
}

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
    }
}

#[test]
fn swapping_conditioning_tokens_changes_the_output() {
    let mut store = ParamStore::new();
    let dit = Dit::new(&mut store, &mut rng(5), "refiner", tiny_dit(16, 2)).unwrap();
    randomize(&mut store, 6);
    let mut r = rng(7);
    let cond = random_tensor(&mut r, 3, 2);
    let noisy = random_tensor(&mut r, 3, 2);
    let swapped = cond.select_rows(&[1, 0, 2]);
    let a = dit.predict(&store, &cond, &noisy, 1.0).unwrap();
    let b = dit.predict(&store, &swapped, &noisy, 1.0).unwrap();
    assert!(a.zip_map(&b, |x, y| x - y).max_abs() > 1e-6);
}

#[test]
fn depth_one_width_eight_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let dit = Dit::new(&mut store, &mut rng(8), "refiner", tiny_dit(8, 1)).unwrap();
    randomize(&mut store, 9);
    let mut r = rng(10);
    let cond = random_tensor(&mut r, 3, 2);
    let noisy = random_tensor(&mut r, 3, 2);
    let target = random_tensor(&mut r, 3, 2);
    let loss = |p: &ParamStore| {
        let mut g = Graph::new(p);
        let (c, t) = (g.input(cond.clone()), g.input(noisy.clone()));
        let out = dit.forward(&mut g, c, t, 2.0).unwrap();
        let l = g.mse_to(out, target.clone());
        (g.value(l).get(0, 0), g.backward(l))
    };
    let (_, grads) = loss(&store);
    let err = max_relative_grad_error(&store, &grads, |p| loss(p).0);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn token_mlp_stepper_has_no_token_interaction() {
    let cfg = RefinerConfig {
        kind: StepperKind::Mlp,
        dit: tiny_dit(8, 1),
        mlp_width: 8,
        mlp_depth: 2,
        ..RefinerConfig::default()
    };
    let mut store = ParamStore::new();
    let refiner = Refiner::new(&mut store, &mut rng(11), cfg).unwrap();
    let z = random_tensor(&mut rng(12), 3, 2);
    let full = refiner.step(&store, &z, &mut rng(0)).unwrap();
    for i in 0..3 {
        let single = z.slice_rows(i, 1);
        let one = refiner.step(&store, &single, &mut rng(0)).unwrap();
        assert_eq!(one.row(0), full.row(i));
    }
    let mut zeroed = store.clone();
    randomize(&mut zeroed, 1);
    for (id, name, _) in store.iter() {
        if name.starts_with("refiner/mlp") {
            zeroed.get_mut(id).fill(0.0);
        }
    }
    let a = refiner.step(&zeroed, &z, &mut rng(0)).unwrap();
    let b = refiner.step(&zeroed, &z.map(|x| x * 7.0), &mut rng(0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn deterministic_stepper_ignores_the_rng() {
    let cfg = RefinerConfig {
        kind: StepperKind::Deterministic,
        dit: tiny_dit(8, 2),
        ..RefinerConfig::default()
    };
    let mut store = ParamStore::new();
    let refiner = Refiner::new(&mut store, &mut rng(13), cfg).unwrap();
    randomize(&mut store, 14);
    let z = random_tensor(&mut rng(15), 3, 2);
    assert_eq!(
        refiner.step(&store, &z, &mut rng(1)).unwrap(),
        refiner.step(&store, &z, &mut rng(2)).unwrap()
    );
    let mut g = Graph::new(&store);
    let l = refiner.loss(&mut g, &z, &z, &mut rng(0)).unwrap();
    assert!(g.value(l).get(0, 0) >= 0.0);
}

#[test]
fn diffusion_loss_at_init_is_the_target_energy() {
    let cfg = RefinerConfig {
        dit: tiny_dit(8, 2),
        ..RefinerConfig::default()
    };
    let mut store = ParamStore::new();
    let refiner = Refiner::new(&mut store, &mut rng(16), cfg).unwrap();
    let mut r = rng(17);
    let cond = random_tensor(&mut r, 3, 2);
    let next = random_tensor(&mut r, 3, 2);
    // replay the draws of the loss to rebuild v
    let mut draw = rng(18);
    let k = draw.random_range(1..=3usize);
    let eps = Tensor::from_fn(3, 2, |_, _| draw.sample(rand_distr::StandardNormal));
    let (_, v) = vpredict_target(&next, &eps, refiner.schedule().alpha_bar(k));
    let mut g = Graph::new(&store);
    let l = refiner.loss(&mut g, &cond, &next, &mut rng(18)).unwrap();
    let expected = v.sum_squares() / v.len() as f64;
    assert!((g.value(l).get(0, 0) - expected).abs() < 1e-12);
}

#[test]
fn latent_scaler_round_trips() {
    let mut store = ParamStore::new();
    let scaler = LatentScaler::new(&mut store, "refiner", 3);
    let mut r = rng(19);
    let samples: Vec<Tensor> = (0..10)
        .map(|_| Tensor::from_fn(4, 3, |_, c| r.random_range(-1.0..1.0) * (c + 1) as f64 + c as f64))
        .collect();
    scaler.fit(&mut store, &samples);
    let z = &samples[0];
    let back = scaler.destandardize(&store, &scaler.standardize(&store, z));
    assert!(back.zip_map(z, |a, b| a - b).max_abs() < 1e-12);
    let all: Vec<Tensor> = samples.iter().map(|s| scaler.standardize(&store, s)).collect();
    for c in 0..3 {
        let mean: f64 = all.iter().flat_map(|t| (0..4).map(move |r| t.get(r, c))).sum::<f64>() / 40.0;
        assert!(mean.abs() < 1e-12);
    }
}

#[test]
fn posterior_fit_adds_the_sampling_variance() {
    let mut store = ParamStore::new();
    let scaler = LatentScaler::new(&mut store, "refiner", 2);
    // channel 0 carries signal, channel 1 has collapsed to a constant mean
    let mus: Vec<Tensor> = (0..4).map(|i| Tensor::from_vec(1, 2, vec![i as f64, 0.5])).collect();
    let sigma = Tensor::from_vec(1, 2, vec![0.0, 1.0]);
    scaler.fit_posterior(&mut store, mus.iter().map(|m| (m, Some(&sigma))));
    let std = store.get(scaler.std);
    assert!((std.get(0, 0) - 1.25f64.sqrt()).abs() < 1e-12);
    assert!((std.get(0, 1) - 1.0).abs() < 1e-12);
    assert_eq!(store.get(scaler.mean), &Tensor::from_vec(1, 2, vec![1.5, 0.5]));
    scaler.fit(&mut store, &mus);
    assert_eq!(store.get(scaler.std).get(0, 1), 1.0);
}
