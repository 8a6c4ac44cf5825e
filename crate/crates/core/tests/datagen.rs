use aroma_core::datagen::burgers::{integrate_burgers, SineTerm};
use aroma_core::datagen::vorticity::integrate_vorticity;
use aroma_core::datagen::{
    kept_count, solve_burgers, solve_burgers_trajectory, solve_vorticity2d, subsample_grid, BurgersConfig,
    Vorticity2DConfig,
};
use aroma_core::Error;

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn short_burgers() -> BurgersConfig {
    BurgersConfig {
        n_time: 40,
        ..BurgersConfig::default()
    }
}

#[test]
fn constant_state_without_forcing_is_steady() {
    let cfg = BurgersConfig {
        viscosity: 5.0,
        n_time: 20,
        ..BurgersConfig::default()
    };
    let frames = integrate_burgers(&cfg, &vec![0.7; cfg.solver_resolution], &[]).unwrap();
    assert!(frames.iter().all(|v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn unforced_energy_never_grows_and_matches_a_fine_reference() {
    let cfg = short_burgers();
    let n = cfg.solver_resolution;
    let ic: Vec<f64> = (0..n)
        .map(|i| 1.5 * (2.0 * std::f64::consts::PI * 2.0 * i as f64 / n as f64).sin())
        .collect();
    let frames = integrate_burgers(&cfg, &ic, &[]).unwrap();
    let norms: Vec<f64> = frames.chunks(cfg.n_space).map(l2).collect();
    for w in norms.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
    }
    let fine = BurgersConfig {
        inner_steps: 4 * cfg.inner_steps,
        ..cfg.clone()
    };
    let reference = integrate_burgers(&fine, &ic, &[]).unwrap();
    let diff: Vec<f64> = frames.iter().zip(&reference).map(|(a, b)| a - b).collect();
    assert!(l2(&diff) / l2(&reference) < 1e-6);
}

#[test]
fn unforced_mean_is_conserved() {
    let cfg = short_burgers();
    let n = cfg.solver_resolution;
    let ic: Vec<f64> = (0..n)
        .map(|i| {
            let x = i as f64 / n as f64;
            0.3 + (2.0 * std::f64::consts::PI * x).sin() + 0.5 * (6.0 * std::f64::consts::PI * x + 1.0).cos()
        })
        .collect();
    let frames = integrate_burgers(&cfg, &ic, &[]).unwrap();
    for f in frames.chunks(cfg.n_space) {
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        assert!((mean - 0.3).abs() < 1e-10, "mean {mean}");
    }
}

#[test]
fn default_burgers_shape() {
    let cfg = BurgersConfig::default();
    let data = solve_burgers(&cfg, 2).unwrap();
    assert_eq!((data.n_traj, data.n_time, data.n_points, data.channels), (2, 250, 100, 1));
    assert_eq!(data.u.len(), 2 * 250 * 100);
    assert_eq!(data.coords.len(), 100);
    assert!(data.u.iter().all(|v| v.is_finite()));
    // 4 bytes per stored float
    assert_eq!(data.u.len() * 4, 2 * 250 * 100 * 4);
}

#[test]
fn halving_the_inner_step_barely_moves_frames() {
    let cfg = short_burgers();
    let fine = BurgersConfig {
        inner_steps: 2 * cfg.inner_steps,
        ..cfg.clone()
    };
    for i in 0..3 {
        let a = solve_burgers_trajectory(&cfg, i).unwrap();
        let b = solve_burgers_trajectory(&fine, i).unwrap();
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        assert!(l2(&diff) / l2(&b) < 1e-4);
    }
}

#[test]
fn forcing_drives_the_state() {
    let cfg = short_burgers();
    let terms = [SineTerm {
        amplitude: 0.4,
        omega: 0.0,
        wavenumber: 1,
        phase: 0.0,
    }];
    let frames = integrate_burgers(&cfg, &vec![0.0; cfg.solver_resolution], &terms).unwrap();
    let last = &frames[(cfg.n_time - 1) * cfg.n_space..];
    assert!(l2(last) > 1e-2);
}

#[test]
fn burgers_generation_is_seeded() {
    let cfg = short_burgers();
    assert_eq!(solve_burgers_trajectory(&cfg, 3).unwrap(), solve_burgers_trajectory(&cfg, 3).unwrap());
    assert_ne!(solve_burgers_trajectory(&cfg, 3).unwrap(), solve_burgers_trajectory(&cfg, 4).unwrap());
}

#[test]
fn invalid_burgers_configs_are_rejected() {
    for cfg in [
        BurgersConfig {
            solver_resolution: 200,
            ..BurgersConfig::default()
        },
        BurgersConfig {
            viscosity: 0.0,
            ..BurgersConfig::default()
        },
        BurgersConfig {
            n_space: 8,
            ..BurgersConfig::default()
        },
    ] {
        assert!(matches!(solve_burgers(&cfg, 1), Err(Error::Config(_))));
    }
}

fn small_ns() -> Vorticity2DConfig {
    Vorticity2DConfig {
        n_space: 32,
        n_time: 6,
        dt_save: 0.5,
        inner_steps: 25,
        ..Vorticity2DConfig::default()
    }
}

#[test]
fn zero_vorticity_without_forcing_stays_zero() {
    let cfg = Vorticity2DConfig {
        forcing_amplitude: 0.0,
        ..small_ns()
    };
    let frames = integrate_vorticity(&cfg, &vec![0.0; 32 * 32]).unwrap();
    assert!(frames.iter().all(|&v| v == 0.0));
}

#[test]
fn single_mode_decays_at_the_heat_rate() {
    let cfg = Vorticity2DConfig {
        forcing_amplitude: 0.0,
        viscosity: 1e-2,
        ..small_ns()
    };
    let n = cfg.n_space;
    let (kx, ky) = (2.0, 1.0);
    let ic: Vec<f64> = (0..n * n)
        .map(|p| {
            let (x, y) = ((p / n) as f64 / n as f64, (p % n) as f64 / n as f64);
            (2.0 * std::f64::consts::PI * (kx * x + ky * y)).cos()
        })
        .collect();
    let frames = integrate_vorticity(&cfg, &ic).unwrap();
    let rate = cfg.viscosity * 4.0 * std::f64::consts::PI.powi(2) * (kx * kx + ky * ky);
    for (t, f) in frames.chunks(n * n).enumerate() {
        let expected = (-rate * t as f64 * cfg.dt_save).exp();
        let amp = f.iter().zip(&ic).map(|(a, b)| a * b).sum::<f64>() / ic.iter().map(|b| b * b).sum::<f64>();
        assert!((amp - expected).abs() < 1e-8, "t={t}: {amp} vs {expected}");
    }
}

#[test]
fn mean_vorticity_is_conserved_with_zero_mean_forcing() {
    let data = solve_vorticity2d(&small_ns(), 1).unwrap();
    for t in 0..data.n_time {
        let f = data.frame(0, t);
        assert!((f.iter().sum::<f64>() / f.len() as f64).abs() < 1e-10);
    }
}

#[test]
fn desk_scale_vorticity_shape() {
    let cfg = Vorticity2DConfig {
        inner_steps: 20,
        ..Vorticity2DConfig::default()
    };
    let data = solve_vorticity2d(&cfg, 1).unwrap();
    assert_eq!((data.n_time, data.n_points, data.spatial_dim), (40, 4096, 2));
    assert!(data.u.iter().all(|v| v.is_finite()));
    let last = data.frame(0, 39);
    assert!(l2(last) > 0.0);
}

#[test]
fn full_fraction_keeps_the_row_major_grid() {
    let g = subsample_grid(&[64, 64], 1.0, 5).unwrap();
    assert_eq!(g.len(), 4096);
    assert!(g.indices.iter().enumerate().all(|(i, &j)| i == j));
    assert_eq!(&g.coords[..4], &[0.0, 0.0, 0.0, 1.0 / 64.0]);
}

#[test]
fn kept_counts_round_ties_to_even() {
    assert_eq!(subsample_grid(&[64, 64], 0.25, 1).unwrap().len(), 1024);
    assert_eq!(subsample_grid(&[64, 128], 0.05, 1).unwrap().len(), 410);
    assert_eq!(kept_count(0.5, 5), 2);
    assert_eq!(kept_count(0.5, 7), 4);
}

#[test]
fn grids_are_seeded_and_sorted() {
    let a = subsample_grid(&[64, 64], 0.25, 7).unwrap();
    let b = subsample_grid(&[64, 64], 0.25, 7).unwrap();
    let c = subsample_grid(&[64, 64], 0.25, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.indices, c.indices);
    assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn sparse_and_invalid_fractions_are_rejected() {
    assert!(matches!(subsample_grid(&[8, 8], 0.1, 0), Err(Error::GridTooSparse { points: 6 })));
    assert!(matches!(subsample_grid(&[8, 8], 0.0, 0), Err(Error::InvalidRatio(_))));
    assert!(matches!(subsample_grid(&[8, 8], 1.5, 0), Err(Error::InvalidRatio(_))));
}
