mod common;

use aroma_lab::checkpoint::{weights_hash, Checkpoint};
use aroma_lab::dataset::NormStats;
use aroma_lab::model::{Model, DECODER_PREFIX, ENCODER_PREFIX, REFINER_PREFIX};
use aroma_lab::LabError;
use serde_json::json;

fn tiny_model(seed: u64) -> Model {
    let mut m = Model::new("burgers", common::tiny_spec(), NormStats::identity(1), seed).unwrap();
    let r = common::tiny_refiner_config(1).refiner;
    m.attach_refiner(r, seed + 1).unwrap();
    m
}

#[test]
fn round_trip_preserves_weights_at_f32_precision() {
    let m = tiny_model(3);
    let dir = tempfile::tempdir().unwrap();
    m.checkpoint(json!({"note": "test"}), json!({"epoch": 1})).write(dir.path()).unwrap();
    let back = Model::load(dir.path()).unwrap();
    assert_eq!(back.spec, m.spec);
    for ((_, na, a), (_, nb, b)) in m.store.iter().zip(back.store.iter()) {
        assert_eq!(na, nb);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
    // a second write of the reloaded model is byte-identical
    let dir2 = tempfile::tempdir().unwrap();
    back.checkpoint(json!({"note": "test"}), json!({"epoch": 1})).write(dir2.path()).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("weights.bin")).unwrap(),
        std::fs::read(dir2.path().join("weights.bin")).unwrap()
    );
}

#[test]
fn manifest_lists_names_shapes_and_offsets() {
    let m = tiny_model(0);
    let ck = m.checkpoint(json!({}), json!({}));
    let mut offset = 0;
    for e in &ck.manifest.tensors {
        assert_eq!(e.offset, offset);
        assert_eq!(e.dtype, "f32");
        assert!(
            [ENCODER_PREFIX, DECODER_PREFIX, REFINER_PREFIX].iter().any(|p| e.name.starts_with(p)),
            "{}",
            e.name
        );
        offset += 4 * e.numel();
    }
    let dir = tempfile::tempdir().unwrap();
    ck.write(dir.path()).unwrap();
    assert_eq!(std::fs::metadata(dir.path().join("weights.bin")).unwrap().len() as usize, offset);
    assert_eq!(ck.manifest.config["model"]["equation"], "burgers");
}

#[test]
fn missing_or_mismatched_tensors_are_errors() {
    let m = tiny_model(0);
    let dir = tempfile::tempdir().unwrap();
    let mut ck = m.checkpoint(json!({}), json!({}));
    ck.tensors.retain(|(n, _)| !n.starts_with(REFINER_PREFIX));
    let mut store = m.store.clone();
    assert!(matches!(ck.load_into(&mut store), Err(LabError::Format(_))));

    let ck = m.checkpoint(json!({}), json!({}));
    ck.write(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("weights.bin")).unwrap();
    let err = Checkpoint::read(dir.path()).err().unwrap();
    assert_eq!(err.kind(), "DependencyError");
}

#[test]
fn weight_hash_tracks_each_prefix() {
    let a = tiny_model(1);
    let mut b = a.clone();
    assert_eq!(weights_hash(&a.store, &[ENCODER_PREFIX]), weights_hash(&b.store, &[ENCODER_PREFIX]));
    let id = b.store.ids_with_prefix(REFINER_PREFIX)[0];
    b.store.get_mut(id).data_mut()[0] += 1.0;
    assert_eq!(
        weights_hash(&a.store, &[ENCODER_PREFIX, DECODER_PREFIX]),
        weights_hash(&b.store, &[ENCODER_PREFIX, DECODER_PREFIX])
    );
    assert_ne!(weights_hash(&a.store, &[REFINER_PREFIX]), weights_hash(&b.store, &[REFINER_PREFIX]));
}

#[test]
fn init_seed_rebuilds_initial_weights() {
    let a = Model::new("burgers", common::tiny_spec(), NormStats::identity(1), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    a.checkpoint(json!({}), json!({})).write(dir.path()).unwrap();
    let init = Model::load(dir.path()).unwrap().initial().unwrap();
    assert_eq!(weights_hash(&a.store, &[ENCODER_PREFIX]), weights_hash(&init.store, &[ENCODER_PREFIX]));
}
