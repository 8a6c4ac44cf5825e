//! Two-stage optimization: the autoencoder first, then the latent stepper on
//! frozen encoder/decoder weights.

use std::path::{Path, PathBuf};
use std::time::Instant;

use aroma_core::encoder::sequence_dropout;
use aroma_core::optim::{AdamW, CosineSchedule};
use aroma_core::{Graph, Grads, ParamId, Regularization, RefinerConfig, StepperKind, Tensor};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::weights_hash;
use crate::dataset::{enumerate_pairs, sample_pairs, slice_subtrajectories, TrajectoryDataset, Window};
use crate::error::{LabError, LabResult};
use crate::model::{AutoencoderSpec, Model, DECODER_PREFIX, ENCODER_PREFIX, REFINER_PREFIX};

/// Desk-scale epoch counts; `--paper-scale` restores the full ones.
pub const DESK_AE_EPOCHS: usize = 500;
pub const FULL_AE_EPOCHS: usize = 5000;
pub const DESK_REFINER_EPOCHS: usize = 500;
pub const FULL_REFINER_EPOCHS: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub kl_weight: f64,
    pub dropout_sequence: f64,
    pub regularization: Regularization,
    /// Defaults to 1e-4 for `l2-ae` and 0 for `vae`.
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
    /// Sub-trajectory length; whole trajectories when unset.
    pub window: Option<usize>,
    /// Leading frames of each window usable for training.
    pub horizon: Option<usize>,
    /// Frames drawn per epoch; one per training window when unset.
    pub samples_per_epoch: Option<usize>,
    /// Random subset of grid points the decoder is supervised on.
    pub query_points: Option<usize>,
    pub eval_every: usize,
    pub validation_frames: usize,
    /// Architecture; the preset of the dataset's equation when unset.
    pub model: Option<AutoencoderSpec>,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: DESK_AE_EPOCHS,
            batch_size: 64,
            lr_max: 1e-3,
            lr_min: 1e-5,
            kl_weight: 1e-4,
            dropout_sequence: 0.1,
            regularization: Regularization::Vae,
            weight_decay: None,
            seed: None,
            window: None,
            horizon: None,
            samples_per_epoch: None,
            query_points: None,
            eval_every: 10,
            validation_frames: 64,
            model: None,
        }
    }
}

impl AeTrainConfig {
    pub fn validate(&self) -> LabResult<()> {
        if !(self.lr_max > self.lr_min && self.lr_min > 0.0) {
            return Err(LabError::Config("need lr_max > lr_min > 0".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(LabError::Config("kl_weight must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_sequence) {
            return Err(LabError::Config("dropout_sequence must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(LabError::Config("batch_size and eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_weight_decay(&self) -> f64 {
        self.weight_decay.unwrap_or(match self.regularization {
            Regularization::L2Ae => 1e-4,
            Regularization::Vae => 0.0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seed: Option<u64>,
    pub window: Option<usize>,
    pub horizon: Option<usize>,
    /// Pairs drawn per epoch; one per training window when unset.
    pub samples_per_epoch: Option<usize>,
    pub eval_every: usize,
    pub validation_pairs: usize,
    pub refiner: RefinerConfig,
}

impl Default for RefinerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: DESK_REFINER_EPOCHS,
            batch_size: 32,
            lr_max: 1e-3,
            lr_min: 1e-5,
            weight_decay: 0.0,
            seed: None,
            window: None,
            horizon: None,
            samples_per_epoch: None,
            eval_every: 10,
            validation_pairs: 64,
            refiner: RefinerConfig::default(),
        }
    }
}

impl RefinerTrainConfig {
    pub fn validate(&self) -> LabResult<()> {
        if !(self.lr_max > self.lr_min && self.lr_min > 0.0) {
            return Err(LabError::Config("need lr_max > lr_min > 0".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(LabError::Config("batch_size and eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the loss-curve CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_recon: f64,
    pub train_kl: f64,
    pub validation: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub curve_csv: PathBuf,
    pub best_validation: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    /// Stage-1 weight hash (stage 2 only), identical before and after.
    pub frozen_hash: Option<String>,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CURVE_CSV: &str = "loss_curve.csv";

fn write_curve(path: &Path, records: &[EpochRecord]) -> LabResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LabError::Format(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r).map_err(|e| LabError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

fn training_windows(ds: &TrajectoryDataset, trajs: &[usize], window: Option<usize>) -> LabResult<Vec<Window>> {
    slice_subtrajectories(ds.manifest.n_time, trajs, window.unwrap_or(ds.manifest.n_time))
}

fn log(verbose: bool, msg: impl FnOnce() -> String) {
    if verbose {
        eprintln!("{}", msg());
    }
}

/// Mean-squared reconstruction error on normalized validation frames.
fn validation_recon(model: &Model, ds: &TrajectoryDataset, frames: &[(usize, usize)]) -> LabResult<f64> {
    let mut total = 0.0;
    for &(traj, t) in frames {
        let snap = ds.snapshot(traj, t)?;
        let rec = model.autoencoder.reconstruct(&model.store, &snap)?;
        total += aroma_core::metrics::mse(rec.data(), snap.values());
    }
    Ok(total / frames.len().max(1) as f64)
}

/// Evenly spread `(traj, t)` probes over the validation windows.
fn validation_frames(windows: &[Window], horizon: Option<usize>, cap: usize) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = windows
        .iter()
        .flat_map(|w| (0..horizon.map_or(w.len, |h| h.min(w.len))).map(move |dt| (w.traj, w.start + dt)))
        .collect();
    if all.len() <= cap || cap == 0 {
        return all;
    }
    (0..cap).map(|i| all[i * all.len() / cap]).collect()
}

fn ids_with(model: &Model, prefixes: &[&str]) -> Vec<ParamId> {
    prefixes.iter().flat_map(|p| model.store.ids_with_prefix(p)).collect()
}

/// Trains encoder and decoder jointly and writes `checkpoint/` (best on
/// validation) and `loss_curve.csv` under `out`.
pub fn train_autoencoder(
    ds: &TrajectoryDataset,
    cfg: &AeTrainConfig,
    seed: u64,
    out: &Path,
    verbose: bool,
) -> LabResult<(Model, TrainReport)> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    let m = &ds.manifest;
    let mut spec = cfg.model.clone().unwrap_or_else(|| AutoencoderSpec::for_equation(&m.equation));
    spec.fit_data(m.spatial_dim, m.channels);
    let mut model = Model::new(&m.equation, spec, ds.norm(), seed)?;

    let (train_trajs, val_trajs) = m.splits.train_validation();
    let windows = training_windows(ds, &train_trajs, cfg.window)?;
    let val_windows = training_windows(ds, &val_trajs, cfg.window)?;
    let frames_per_window: Vec<usize> = windows
        .iter()
        .map(|w| cfg.horizon.map_or(w.len, |h| h.min(w.len)))
        .collect();
    if windows.is_empty() || frames_per_window.iter().all(|&n| n == 0) {
        return Err(LabError::NoPairsAvailable("no training frames".into()));
    }
    let val_frames = validation_frames(
        if val_windows.is_empty() { &windows } else { &val_windows },
        cfg.horizon,
        cfg.validation_frames,
    );

    let trainable = ids_with(&model, &[ENCODER_PREFIX, DECODER_PREFIX]);
    let mut opt = AdamW::new(&model.store, &trainable, cfg.effective_weight_decay());
    let samples = cfg.samples_per_epoch.unwrap_or(windows.len()).max(1);
    let steps_per_epoch = samples.div_ceil(cfg.batch_size);
    let schedule = CosineSchedule {
        lr_max: cfg.lr_max,
        lr_min: cfg.lr_min,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let curve = out.join(CURVE_CSV);
    let run = json!({ "stage": "autoencoder", "train": cfg, "seed": seed });
    let mut records = Vec::new();
    let mut best = (f64::INFINITY, 0usize);
    let mut step = 0;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let (mut sum_loss, mut sum_recon, mut sum_kl, mut count) = (0.0, 0.0, 0.0, 0usize);
        for b in 0..steps_per_epoch {
            let batch = cfg.batch_size.min(samples - b * cfg.batch_size);
            let mut grads = Grads::new(model.store.len());
            for _ in 0..batch {
                let wi = rng.random_range(0..windows.len());
                let w = windows[wi];
                let t = w.start + rng.random_range(0..frames_per_window[wi].max(1));
                let snap = ds.snapshot(w.traj, t)?;
                let input = if cfg.dropout_sequence > 0.0 {
                    sequence_dropout(&snap, cfg.dropout_sequence, &mut rng)?
                } else {
                    snap.clone()
                };
                let target_snap = match cfg.query_points {
                    Some(q) if q < snap.len() => {
                        let mut idx = index::sample(&mut rng, snap.len(), q).into_vec();
                        idx.sort_unstable();
                        snap.select(&idx)
                    }
                    _ => snap,
                };
                let target = Tensor::from_vec(target_snap.len(), target_snap.channels(), target_snap.values().to_vec());
                let mut g = Graph::new(&model.store);
                let loss = model.autoencoder.loss(
                    &mut g,
                    &input,
                    target_snap.coords(),
                    &target,
                    cfg.kl_weight,
                    cfg.regularization,
                    &mut rng,
                )?;
                let l = g.value(loss.total).get(0, 0);
                if !l.is_finite() {
                    write_curve(&curve, &records)?;
                    return Err(LabError::Diverged(format!(
                        "non-finite autoencoder loss at epoch {epoch}; last good checkpoint kept at {}",
                        ckpt_dir.display()
                    )));
                }
                sum_loss += l;
                sum_recon += g.value(loss.recon).get(0, 0);
                sum_kl += g.value(loss.kl).get(0, 0);
                count += 1;
                grads.merge(&g.backward(loss.total));
            }
            grads.scale(1.0 / batch as f64);
            opt.update(&mut model.store, &grads, schedule.lr(step));
            step += 1;
        }
        let validation = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let v = validation_recon(&model, ds, &val_frames)?;
            if v < best.0 {
                best = (v, epoch);
                let meta = json!({ "epoch": epoch, "validation_recon_mse": v });
                model.checkpoint(run.clone(), meta).write(&ckpt_dir)?;
            }
            Some(v)
        } else {
            None
        };
        let n = count.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            step,
            lr: schedule.lr(step),
            train_loss: sum_loss / n,
            train_recon: sum_recon / n,
            train_kl: sum_kl / n,
            validation,
            seconds: start.elapsed().as_secs_f64(),
        };
        log(verbose && validation.is_some(), || {
            format!(
                "[autoencoder] epoch {epoch}/{} loss {:.3e} recon {:.3e} val {:.3e} ({:.0}s)",
                cfg.epochs,
                rec.train_loss,
                rec.train_recon,
                validation.unwrap_or(f64::NAN),
                rec.seconds
            )
        });
        records.push(rec);
    }
    write_curve(&curve, &records)?;
    // hand back the selected weights, not the last ones
    let best_model = Model::load(&ckpt_dir)?;
    Ok((
        best_model,
        TrainReport {
            checkpoint: ckpt_dir,
            curve_csv: curve,
            best_validation: best.0,
            best_epoch: best.1,
            epochs_run: cfg.epochs,
            seed,
            records,
            frozen_hash: None,
        },
    ))
}

/// Posterior statistics of every frame a stage-2 run can touch.
pub struct LatentCache {
    n_time: usize,
    mu: Vec<Option<Tensor>>,
    sigma: Vec<Option<Tensor>>,
}

impl LatentCache {
    pub fn build(model: &Model, ds: &TrajectoryDataset, windows: &[Window], horizon: Option<usize>) -> LabResult<Self> {
        let n_time = ds.manifest.n_time;
        let mut cache = Self {
            n_time,
            mu: vec![None; ds.manifest.n_traj * n_time],
            sigma: vec![None; ds.manifest.n_traj * n_time],
        };
        for w in windows {
            for dt in 0..horizon.map_or(w.len, |h| h.min(w.len)) {
                let i = w.traj * n_time + w.start + dt;
                if cache.mu[i].is_none() {
                    let z = model.autoencoder.encode(&model.store, &ds.snapshot(w.traj, w.start + dt)?)?;
                    cache.sigma[i] = Some(z.log_sigma.map(f64::exp));
                    cache.mu[i] = Some(z.mu);
                }
            }
        }
        Ok(cache)
    }

    pub fn mean(&self, traj: usize, t: usize) -> &Tensor {
        self.mu[traj * self.n_time + t].as_ref().expect("frame was encoded")
    }

    pub fn sigma(&self, traj: usize, t: usize) -> &Tensor {
        self.sigma[traj * self.n_time + t].as_ref().expect("frame was encoded")
    }

    /// Fresh draw `mu + sigma * eps`.
    pub fn sample<R: Rng + ?Sized>(&self, traj: usize, t: usize, rng: &mut R) -> Tensor {
        let i = traj * self.n_time + t;
        let (mu, sigma) = (self.mu[i].as_ref().expect("encoded"), self.sigma[i].as_ref().expect("encoded"));
        let mut out = mu.clone();
        for (o, s) in out.data_mut().iter_mut().zip(sigma.data()) {
            *o += s * rng.sample::<f64, _>(StandardNormal);
        }
        out
    }
}

/// One-step latent MSE in standardized coordinates, with a fixed sampler seed.
fn validation_step_mse(model: &Model, cache: &LatentCache, pairs: &[crate::dataset::PairIndex]) -> LabResult<f64> {
    let refiner = model.refiner()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut total = 0.0;
    for p in pairs {
        let cond = refiner.scaler.standardize(&model.store, cache.mean(p.traj, p.t));
        let next = refiner.scaler.standardize(&model.store, cache.mean(p.traj, p.t + 1));
        let pred = refiner.step_standardized(&model.store, &cond, &mut rng)?;
        total += aroma_core::metrics::mse(pred.data(), next.data());
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Trains the stepper on latents of the frozen stage-1 model loaded from
/// `stage1`. Writes a checkpoint holding all three weight groups.
pub fn train_refiner(
    ds: &TrajectoryDataset,
    stage1: &Path,
    cfg: &RefinerTrainConfig,
    seed: u64,
    out: &Path,
    verbose: bool,
) -> LabResult<(Model, TrainReport)> {
    cfg.validate()?;
    let mut model = Model::load(stage1).map_err(|e| match e {
        LabError::Dependency { .. } => LabError::dependency("stage-1 checkpoint", stage1),
        other => other,
    })?;
    if model.refiner.is_some() {
        return Err(LabError::Config(format!("{} already holds a refiner", stage1.display())));
    }
    std::fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    let frozen = weights_hash(&model.store, &[ENCODER_PREFIX, DECODER_PREFIX]);

    let (train_trajs, val_trajs) = ds.manifest.splits.train_validation();
    let windows = training_windows(ds, &train_trajs, cfg.window)?;
    let mut val_windows = training_windows(ds, &val_trajs, cfg.window)?;
    if val_windows.is_empty() {
        val_windows = windows.clone();
    }
    // fail early on an empty horizon
    sample_pairs(&windows, cfg.horizon, 0, &mut ChaCha8Rng::seed_from_u64(0))?;
    let val_pairs: Vec<_> = {
        let all = enumerate_pairs(&val_windows, cfg.horizon);
        let cap = cfg.validation_pairs.max(1);
        if all.len() <= cap {
            all
        } else {
            (0..cap).map(|i| all[i * all.len() / cap]).collect()
        }
    };
    if val_pairs.is_empty() {
        return Err(LabError::NoPairsAvailable("no validation pairs inside the horizon".into()));
    }

    log(verbose, || format!("[refiner] encoding {} windows", windows.len() + val_windows.len()));
    let mut all_windows = windows.clone();
    all_windows.extend_from_slice(&val_windows);
    let cache = LatentCache::build(&model, ds, &all_windows, cfg.horizon)?;

    model.attach_refiner(cfg.refiner.clone(), seed)?;
    let refiner = model.refiner.clone().expect("attached");
    // the diffusion stepper sees posterior draws, the others see means
    let sampled = refiner.kind() == StepperKind::Diffusion;
    let train_frames: Vec<(usize, usize)> = windows
        .iter()
        .flat_map(|w| (0..cfg.horizon.map_or(w.len, |h| h.min(w.len))).map(move |dt| (w.traj, w.start + dt)))
        .collect();
    refiner.scaler.fit_posterior(
        &mut model.store,
        train_frames
            .iter()
            .map(|&(traj, t)| (cache.mean(traj, t), sampled.then(|| cache.sigma(traj, t)))),
    );

    let scaler_ids = [refiner.scaler.mean, refiner.scaler.std];
    let trainable: Vec<ParamId> = model
        .store
        .ids_with_prefix(REFINER_PREFIX)
        .into_iter()
        .filter(|id| !scaler_ids.contains(id))
        .collect();
    let mut opt = AdamW::new(&model.store, &trainable, cfg.weight_decay);
    let samples = cfg.samples_per_epoch.unwrap_or(windows.len()).max(1);
    let steps_per_epoch = samples.div_ceil(cfg.batch_size);
    let schedule = CosineSchedule {
        lr_max: cfg.lr_max,
        lr_min: cfg.lr_min,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let curve = out.join(CURVE_CSV);
    let run = json!({ "stage": "refiner", "train": cfg, "seed": seed, "stage1": stage1 });
    let mut records = Vec::new();
    let mut best = (f64::INFINITY, 0usize);
    let mut step = 0;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let (mut sum_loss, mut count) = (0.0, 0usize);
        for b in 0..steps_per_epoch {
            let batch = cfg.batch_size.min(samples - b * cfg.batch_size);
            let pairs = sample_pairs(&windows, cfg.horizon, batch, &mut rng)?;
            let mut grads = Grads::new(model.store.len());
            for p in pairs {
                let (zt, zn) = if sampled {
                    (cache.sample(p.traj, p.t, &mut rng), cache.sample(p.traj, p.t + 1, &mut rng))
                } else {
                    (cache.mean(p.traj, p.t).clone(), cache.mean(p.traj, p.t + 1).clone())
                };
                let cond = refiner.scaler.standardize(&model.store, &zt);
                let next = refiner.scaler.standardize(&model.store, &zn);
                let mut g = Graph::new(&model.store);
                let loss = refiner.loss(&mut g, &cond, &next, &mut rng)?;
                let l = g.value(loss).get(0, 0);
                if !l.is_finite() {
                    write_curve(&curve, &records)?;
                    return Err(LabError::Diverged(format!(
                        "non-finite refiner loss at epoch {epoch}; last good checkpoint kept at {}",
                        ckpt_dir.display()
                    )));
                }
                sum_loss += l;
                count += 1;
                grads.merge(&g.backward(loss));
            }
            grads.scale(1.0 / batch as f64);
            opt.update(&mut model.store, &grads, schedule.lr(step));
            step += 1;
        }
        let validation = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let v = validation_step_mse(&model, &cache, &val_pairs)?;
            if v < best.0 {
                best = (v, epoch);
                let meta = json!({ "epoch": epoch, "validation_step_mse": v, "frozen_hash": frozen });
                model.checkpoint(run.clone(), meta).write(&ckpt_dir)?;
            }
            Some(v)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            step,
            lr: schedule.lr(step),
            train_loss: sum_loss / count.max(1) as f64,
            train_recon: f64::NAN,
            train_kl: f64::NAN,
            validation,
            seconds: start.elapsed().as_secs_f64(),
        };
        log(verbose && validation.is_some(), || {
            format!(
                "[refiner] epoch {epoch}/{} loss {:.3e} val {:.3e} ({:.0}s)",
                cfg.epochs,
                rec.train_loss,
                validation.unwrap_or(f64::NAN),
                rec.seconds
            )
        });
        records.push(rec);
    }
    write_curve(&curve, &records)?;
    if weights_hash(&model.store, &[ENCODER_PREFIX, DECODER_PREFIX]) != frozen {
        return Err(LabError::Config("stage-1 weights changed during stage 2".into()));
    }
    let best_model = Model::load(&ckpt_dir)?;
    Ok((
        best_model,
        TrainReport {
            checkpoint: ckpt_dir,
            curve_csv: curve,
            best_validation: best.0,
            best_epoch: best.1,
            epochs_run: cfg.epochs,
            seed,
            records,
            frozen_hash: Some(frozen),
        },
    ))
}
