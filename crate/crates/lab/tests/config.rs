use aroma_lab::config::{apply_override, load_config, resolve_seed};
use aroma_lab::generate::GenerateConfig;
use aroma_lab::training::AeTrainConfig;
use serde_json::json;

#[test]
fn overrides_apply_after_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"epochs": 7, "lr_max": 0.01, "model": {"encoder": {"num_latents": 16}}}"#).unwrap();
    let sets = vec!["epochs=9".to_string(), "model.decoder.dim=64".to_string(), "regularization=l2-ae".to_string()];
    let cfg: AeTrainConfig = load_config(Some(&path), &sets).unwrap();
    assert_eq!(cfg.epochs, 9);
    assert_eq!(cfg.lr_max, 0.01);
    let model = cfg.model.unwrap();
    assert_eq!(model.encoder.num_latents, 16);
    assert_eq!(model.decoder.dim, 64);
    assert_eq!(cfg.regularization, aroma_core::Regularization::L2Ae);
    // untouched fields keep their defaults
    assert_eq!(cfg.batch_size, AeTrainConfig::default().batch_size);
}

#[test]
fn unknown_keys_and_bad_syntax_are_rejected() {
    assert!(load_config::<AeTrainConfig>(None, &["epoch=3".into()]).is_err());
    assert!(load_config::<AeTrainConfig>(None, &["model.encoder.width=3".into()]).is_err());
    assert!(load_config::<AeTrainConfig>(None, &["epochs".into()]).is_err());
    let mut v = json!({"a": 1});
    assert!(apply_override(&mut v, "a.b=2").is_err());
    apply_override(&mut v, "c.d=\"x\"").unwrap();
    apply_override(&mut v, "e=plain").unwrap();
    assert_eq!(v, json!({"a": 1, "c": {"d": "x"}, "e": "plain"}));
}

#[test]
fn explicit_seed_wins() {
    assert_eq!(resolve_seed(Some(5)).unwrap(), 5);
}

#[test]
fn flat_data_config_splits_keys() {
    let flat = json!({"n_time": 10, "viscosity": 0.05, "n_train": 3, "keep_fraction": 0.5});
    let cfg = GenerateConfig::from_flat("burgers", &flat).unwrap();
    assert_eq!(cfg.split.n_train, 3);
    assert_eq!(cfg.split.n_test, 64);
    let back = cfg.to_flat();
    assert_eq!(back["viscosity"], 0.05);
    assert_eq!(back["n_space"], 100);
    assert!(GenerateConfig::from_flat("burgers", &json!({"bogus": 1})).is_err());
    assert!(GenerateConfig::from_flat("kdv", &json!({})).is_err());
    let ns = GenerateConfig::from_flat("ns2d", &json!({})).unwrap();
    assert_eq!((ns.split.n_train, ns.split.n_test), (64, 8));
}
