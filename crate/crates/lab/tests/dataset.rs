mod common;

use aroma_lab::dataset::{
    enumerate_pairs, read_f32, sample_pairs, slice_subtrajectories, TrajectoryDataset, Window,
};
use aroma_lab::LabError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn write_then_read_is_byte_identical() {
    let ds = common::tiny_burgers(12, 3, 1, 1.0);
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let back = TrajectoryDataset::read(dir.path()).unwrap();
    assert_eq!(back, ds);
    let raw = std::fs::read(dir.path().join("u.bin")).unwrap();
    let expect: Vec<u8> = ds.raw_u().iter().flat_map(|v| v.to_le_bytes()).collect();
    assert_eq!(raw, expect);
    // writing the reloaded copy gives the same bytes again
    let dir2 = tempfile::tempdir().unwrap();
    back.write(dir2.path()).unwrap();
    for f in ["u.bin", "coords.bin", "times.bin", "manifest.json"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(dir2.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn blob_size_follows_shape() {
    let ds = common::tiny_burgers(10, 2, 1, 1.0);
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let len = std::fs::metadata(dir.path().join("u.bin")).unwrap().len();
    assert_eq!(len as usize, 3 * 10 * 100 * 4);
    let coords = std::fs::metadata(dir.path().join("coords.bin")).unwrap().len();
    assert_eq!(coords as usize, 3 * 100 * 4);
    assert_eq!(read_f32(&dir.path().join("times.bin")).unwrap().len(), 10);
}

#[test]
fn shape_mismatch_is_rejected() {
    let ds = common::tiny_burgers(6, 2, 1, 1.0);
    let mut m = ds.manifest.clone();
    m.n_time += 1;
    let err = TrajectoryDataset::new(m, ds.raw_u().to_vec(), vec![0.0; 300], ds.times().to_vec()).unwrap_err();
    assert!(matches!(err, LabError::Format(_)), "{err}");

    // a truncated blob on disk is caught at read time
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let p = dir.path().join("u.bin");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(TrajectoryDataset::read(dir.path()), Err(LabError::Format(_))));
}

#[test]
fn coordinates_outside_unit_box_are_rejected() {
    let ds = common::tiny_burgers(4, 1, 1, 1.0);
    let mut coords: Vec<f32> = (0..2).flat_map(|i| ds.coords(i).to_vec()).collect();
    coords[3] = 1.0;
    let err = TrajectoryDataset::new(ds.manifest.clone(), ds.raw_u().to_vec(), coords, ds.times().to_vec()).unwrap_err();
    assert!(matches!(err, LabError::Format(_)));
}

#[test]
fn missing_directory_is_a_dependency_error() {
    let err = TrajectoryDataset::read(std::path::Path::new("/nonexistent/dataset")).unwrap_err();
    assert_eq!(err.kind(), "DependencyError");
    assert_eq!(err.payload()["dependency"], "dataset");
}

#[test]
fn normalization_uses_training_split_only() {
    let ds = common::tiny_burgers(8, 3, 2, 1.0);
    let norm = ds.norm();
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0.0;
    for i in 0..3 {
        for t in 0..8 {
            for &v in ds.frame(i, t) {
                sum += v as f64;
                sq += (v as f64).powi(2);
                n += 1.0;
            }
        }
    }
    let mean = sum / n;
    let std = (sq / n - mean * mean).sqrt();
    assert!((norm.mean[0] - mean).abs() < 1e-9);
    assert!((norm.std[0] - std).abs() < 1e-9);

    let mut v = ds.frame_f64(0, 3);
    let orig = v.clone();
    norm.normalize(&mut v);
    norm.denormalize(&mut v);
    for (a, b) in v.iter().zip(&orig) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn window_counts() {
    // 250 frames, window 50: five independent items per trajectory
    let w = slice_subtrajectories(250, &[0, 1, 2], 50).unwrap();
    assert_eq!(w.len(), 15);
    assert_eq!(w[4], Window { traj: 0, start: 200, len: 50 });
    // leftover frames are dropped
    assert_eq!(slice_subtrajectories(40, &[0], 15).unwrap().len(), 2);
    assert!(matches!(
        slice_subtrajectories(40, &[0], 41),
        Err(LabError::InvalidWindow { window: 41, n_time: 40 })
    ));
    assert!(matches!(slice_subtrajectories(40, &[0], 0), Err(LabError::InvalidWindow { .. })));
}

#[test]
fn pair_counts() {
    let trajs: Vec<usize> = (0..256).collect();
    let w = slice_subtrajectories(40, &trajs, 40).unwrap();
    // In-t horizon of 20 frames: 19 pairs per trajectory
    assert_eq!(enumerate_pairs(&w, Some(20)).len(), 256 * 19);
    assert_eq!(enumerate_pairs(&w, None).len(), 256 * 39);
    let w = slice_subtrajectories(250, &[0], 50).unwrap();
    assert_eq!(enumerate_pairs(&w, None).len(), 5 * 49);
}

#[test]
fn no_pairs_is_an_error() {
    let w = [Window { traj: 0, start: 0, len: 1 }];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(sample_pairs(&w, None, 4, &mut rng), Err(LabError::NoPairsAvailable(_))));
}

#[test]
fn pairs_share_one_grid() {
    let ds = common::tiny_burgers(6, 2, 1, 0.5);
    let p = ds.pair(aroma_lab::dataset::PairIndex { traj: 1, t: 2 }).unwrap();
    assert_eq!(p.u_t.coords(), p.u_next.coords());
    assert_eq!(p.u_t.len(), 50);
    // grids differ across trajectories
    assert_ne!(ds.coords(0), ds.coords(1));
}

#[test]
fn subsample_matches_direct_generation_counts() {
    let full = common::tiny_burgers(4, 2, 1, 1.0);
    let sparse = full.subsample(0.25, 3).unwrap();
    assert_eq!(sparse.manifest.n_points, 25);
    // every kept value comes from the parent at the same coordinate
    let parent = full.coords(0);
    for (k, &x) in sparse.coords(0).iter().enumerate() {
        let p = parent.iter().position(|&y| y == x).unwrap();
        assert_eq!(sparse.frame(0, 2)[k], full.frame(0, 2)[p]);
    }
    assert!(sparse.subsample(0.5, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn windows_are_disjoint_and_in_range(n_time in 1usize..300, window in 1usize..300, n_traj in 1usize..4) {
        let trajs: Vec<usize> = (0..n_traj).collect();
        match slice_subtrajectories(n_time, &trajs, window) {
            Ok(ws) => {
                prop_assert_eq!(ws.len(), n_traj * (n_time / window));
                for w in &ws {
                    prop_assert!(w.start + w.len <= n_time);
                    prop_assert_eq!(w.start % window, 0);
                }
            }
            Err(_) => prop_assert!(window > n_time),
        }
    }

    #[test]
    fn sampled_pairs_stay_inside_horizon(h in 2usize..50, seed in 0u64..1000) {
        let ws = slice_subtrajectories(200, &[0, 1], 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in sample_pairs(&ws, Some(h), 32, &mut rng).unwrap() {
            let w = ws.iter().find(|w| w.traj == p.traj && p.t >= w.start && p.t < w.start + w.len).unwrap();
            prop_assert!(p.t + 1 < w.start + h.min(w.len));
        }
    }
}
