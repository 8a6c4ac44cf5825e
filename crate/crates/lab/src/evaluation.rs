//! Rollouts and the metrics and analyses computed from them.

use std::time::Instant;

use aroma_core::metrics::{
    correlation_over_time, correlation_per_frame, ensemble_mean_std, entropy, high_correlation_time, horizon_mse,
    locality_fraction, relative_l2, Horizon,
};
use aroma_core::{EncodeMode, FieldSnapshot, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{slice_subtrajectories, TrajectoryDataset, Window};
use crate::error::{LabError, LabResult};
use crate::model::Model;

/// Decoded fields (denormalized, `Q x C` per step) and the latent path.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub fields: Vec<Vec<f64>>,
    pub latents: Vec<Tensor>,
    /// Wall time of each latent step.
    pub step_seconds: Vec<f64>,
    pub seed: u64,
    /// Set when the latent state went non-finite; the result stops there.
    pub truncated: bool,
}

/// Iterates the stepper from `z0`. Stops early on non-finite latents.
pub fn latent_rollout(model: &Model, z0: Tensor, n_steps: usize, seed: u64) -> LabResult<(Vec<Tensor>, Vec<f64>, bool)> {
    let mut latents = vec![z0];
    let mut secs = Vec::with_capacity(n_steps);
    if n_steps == 0 {
        return Ok((latents, secs, false));
    }
    let refiner = model.refiner()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_steps {
        let t0 = Instant::now();
        let next = match refiner.step(&model.store, latents.last().expect("non-empty"), &mut rng) {
            Ok(z) if z.all_finite() => z,
            Ok(_) | Err(aroma_core::Error::RefinerNumerical) => return Ok((latents, secs, true)),
            Err(e) => return Err(e.into()),
        };
        secs.push(t0.elapsed().as_secs_f64());
        latents.push(next);
    }
    Ok((latents, secs, false))
}

/// Decodes latents at `query` and maps back to physical units.
pub fn decode_path(model: &Model, latents: &[Tensor], query: &[f64]) -> LabResult<Vec<Vec<f64>>> {
    let norm = &model.spec.normalization;
    latents
        .iter()
        .map(|z| {
            let mut v = model.autoencoder.decode(&model.store, z, query)?.into_vec();
            norm.denormalize(&mut v);
            Ok(v)
        })
        .collect()
}

/// One encode of the (normalized) initial state, `n_steps` latent steps, and
/// a decode of every step at `query`.
pub fn rollout(model: &Model, u0: &FieldSnapshot, n_steps: usize, query: &[f64], seed: u64) -> LabResult<RolloutResult> {
    let z0 = model.autoencoder.encode(&model.store, u0)?.z;
    let (latents, step_seconds, truncated) = latent_rollout(model, z0, n_steps, seed)?;
    let fields = decode_path(model, &latents, query)?;
    Ok(RolloutResult {
        fields,
        latents,
        step_seconds,
        seed,
        truncated,
    })
}

/// Which test items `evaluate` rolls out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Non-overlapping windows of this length as independent items.
    pub window: Option<usize>,
    /// Without a window: first frame of each item.
    pub start: usize,
    /// Without a window: steps per item (to the end of the trajectory when unset).
    pub steps: Option<usize>,
    pub max_items: Option<usize>,
    /// Frames in the In-t part; half the item when unset.
    pub horizon: Option<usize>,
    pub correlation_threshold: f64,
    pub seed: u64,
    /// Also score plain encode-decode reconstructions.
    pub reconstruction: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            window: None,
            start: 0,
            steps: None,
            max_items: None,
            horizon: None,
            correlation_threshold: 0.8,
            seed: 0,
            reconstruction: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ItemScore {
    pub traj: usize,
    pub start: usize,
    pub steps: usize,
    pub relative_l2: Option<f64>,
    pub reconstruction_relative_l2: Option<f64>,
    pub high_correlation_time: usize,
    pub truncated: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub items: usize,
    pub steps: usize,
    /// Mean over items of the relative L2 of the predicted frames (initial
    /// frame excluded), on physical units.
    pub relative_l2: f64,
    pub relative_l2_excluded: usize,
    pub reconstruction_relative_l2: Option<f64>,
    pub in_t_mse: f64,
    pub out_t_mse: f64,
    pub horizon: usize,
    pub correlation: Vec<Option<f64>>,
    /// First step where the averaged curve drops below the threshold.
    pub high_correlation_time: usize,
    pub mean_item_high_correlation_time: f64,
    pub truncated_items: usize,
    pub seconds_per_step: f64,
    pub per_item: Vec<ItemScore>,
}

pub fn evaluation_items(ds: &TrajectoryDataset, opts: &EvalOptions) -> LabResult<Vec<Window>> {
    let n_time = ds.manifest.n_time;
    let test = &ds.manifest.splits.test;
    let mut items = match opts.window {
        Some(w) => slice_subtrajectories(n_time, test, w)?,
        None => {
            if opts.start >= n_time {
                return Err(LabError::InvalidWindow {
                    window: opts.start + 1,
                    n_time,
                });
            }
            let len = opts.steps.map_or(n_time - opts.start, |s| (s + 1).min(n_time - opts.start));
            test.iter()
                .map(|&traj| Window {
                    traj,
                    start: opts.start,
                    len,
                })
                .collect()
        }
    };
    if let Some(cap) = opts.max_items {
        items.truncate(cap);
    }
    if items.is_empty() {
        return Err(LabError::Config("no test items to evaluate".into()));
    }
    Ok(items)
}

/// Ground truth of one item, frames concatenated.
pub fn truth_of(ds: &TrajectoryDataset, w: &Window) -> Vec<f64> {
    (w.start..w.start + w.len).flat_map(|t| ds.frame_f64(w.traj, t)).collect()
}

pub struct Evaluation {
    pub summary: EvalSummary,
    /// Predicted and true trajectories of each item, frames concatenated.
    pub predictions: Vec<(Vec<f64>, Vec<f64>)>,
}

pub fn evaluate(model: &Model, ds: &TrajectoryDataset, opts: &EvalOptions) -> LabResult<Evaluation> {
    let items = evaluation_items(ds, opts)?;
    let frame_len = ds.frame_len();
    let mut predictions = Vec::with_capacity(items.len());
    let mut per_item = Vec::with_capacity(items.len());
    let mut recon_scores = Vec::new();
    let mut step_time = (0.0, 0usize);
    for (i, w) in items.iter().enumerate() {
        let u0 = ds.snapshot(w.traj, w.start)?;
        let res = rollout(model, &u0, w.len - 1, u0.coords(), opts.seed.wrapping_add(i as u64))?;
        step_time.0 += res.step_seconds.iter().sum::<f64>();
        step_time.1 += res.step_seconds.len();
        let mut pred: Vec<f64> = res.fields.concat();
        // a truncated rollout scores its missing frames as NaN
        pred.resize(w.len * frame_len, f64::NAN);
        let truth = truth_of(ds, w);
        let rel = aroma_core::metrics::relative_l2_single(&pred[frame_len..], &truth[frame_len..]);
        let recon = if opts.reconstruction {
            let mut rec = Vec::with_capacity(truth.len());
            for t in w.start..w.start + w.len {
                let snap = ds.snapshot(w.traj, t)?;
                let mut v = model.autoencoder.reconstruct(&model.store, &snap)?.into_vec();
                model.spec.normalization.denormalize(&mut v);
                rec.extend(v);
            }
            let r = aroma_core::metrics::relative_l2_single(&rec, &truth);
            recon_scores.push((rec, truth.clone()));
            r
        } else {
            None
        };
        let curve = correlation_per_frame(&pred, &truth, frame_len);
        per_item.push(ItemScore {
            traj: w.traj,
            start: w.start,
            steps: w.len - 1,
            relative_l2: rel,
            reconstruction_relative_l2: recon,
            high_correlation_time: high_correlation_time(&curve, opts.correlation_threshold),
            truncated: res.truncated,
        });
        predictions.push((pred, truth));
    }
    let rollout_l2 = relative_l2(
        predictions
            .iter()
            .map(|(p, t)| (&p[frame_len..], &t[frame_len..])),
    );
    let recon_l2 = opts
        .reconstruction
        .then(|| relative_l2(recon_scores.iter().map(|(p, t)| (p.as_slice(), t.as_slice()))).value);
    let n_frames = items[0].len;
    let horizon = opts.horizon.unwrap_or(n_frames / 2).min(n_frames);
    let (mut in_t, mut out_t) = (0.0, 0.0);
    for (p, t) in &predictions {
        let (pi, ti) = (&p[..horizon * frame_len], &t[..horizon * frame_len]);
        let (po, to) = (&p[horizon * frame_len..], &t[horizon * frame_len..]);
        in_t += aroma_core::metrics::mse(pi, ti);
        out_t += if po.is_empty() { 0.0 } else { aroma_core::metrics::mse(po, to) };
    }
    let n = predictions.len() as f64;
    let correlation = correlation_over_time(predictions.iter().map(|(p, t)| (p.as_slice(), t.as_slice())), frame_len);
    let summary = EvalSummary {
        items: items.len(),
        steps: n_frames - 1,
        relative_l2: rollout_l2.value,
        relative_l2_excluded: rollout_l2.excluded,
        reconstruction_relative_l2: recon_l2,
        in_t_mse: in_t / n,
        out_t_mse: out_t / n,
        horizon,
        high_correlation_time: high_correlation_time(&correlation, opts.correlation_threshold),
        mean_item_high_correlation_time: per_item.iter().map(|s| s.high_correlation_time as f64).sum::<f64>() / n,
        correlation,
        truncated_items: per_item.iter().filter(|s| s.truncated).count(),
        seconds_per_step: step_time.0 / step_time.1.max(1) as f64,
        per_item,
    };
    Ok(Evaluation { summary, predictions })
}

/// MSE over the two halves of a `frames x frame_len` trajectory.
pub fn split_mse(pred: &[f64], truth: &[f64], frame_len: usize) -> (f64, f64) {
    (
        horizon_mse(pred, truth, frame_len, Horizon::In),
        horizon_mse(pred, truth, frame_len, Horizon::Out),
    )
}

/// Pointwise statistics of an ensemble of rollouts from one initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    /// Spatial mean of the pointwise std, per step.
    pub spread: Vec<f64>,
    pub samples: usize,
    pub truncated: usize,
}

/// `n_samples` rollouts with seeds `seed, seed + 1, ...`.
pub fn ensemble(
    model: &Model,
    u0: &FieldSnapshot,
    n_steps: usize,
    n_samples: usize,
    query: &[f64],
    seed: u64,
) -> LabResult<Ensemble> {
    if n_samples == 0 {
        return Err(LabError::Config("an ensemble needs at least one sample".into()));
    }
    let z0 = model.autoencoder.encode(&model.store, u0)?.z;
    let mut runs = Vec::with_capacity(n_samples);
    let mut truncated = 0;
    for s in 0..n_samples {
        let (lat, _, tr) = latent_rollout(model, z0.clone(), n_steps, seed.wrapping_add(s as u64))?;
        truncated += tr as usize;
        let mut fields = decode_path(model, &lat, query)?;
        let width = fields[0].len();
        fields.resize(n_steps + 1, vec![f64::NAN; width]);
        runs.push(fields);
    }
    let mut mean = Vec::with_capacity(n_steps + 1);
    let mut std = Vec::with_capacity(n_steps + 1);
    for t in 0..=n_steps {
        let frames: Vec<Vec<f64>> = runs.iter().map(|r| r[t].clone()).collect();
        let (m, s) = ensemble_mean_std(&frames);
        mean.push(m);
        std.push(s);
    }
    let spread = std.iter().map(|s| s.iter().sum::<f64>() / s.len().max(1) as f64).collect();
    Ok(Ensemble {
        mean,
        std,
        spread,
        samples: n_samples,
        truncated,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionStage {
    Geometry,
    Observation,
    Decoder,
}

impl AttentionStage {
    pub fn parse(s: &str) -> LabResult<Self> {
        match s {
            "geometry" => Ok(Self::Geometry),
            "observation" => Ok(Self::Observation),
            "decoder" => Ok(Self::Decoder),
            other => Err(LabError::Config(format!("unknown attention stage {other:?}"))),
        }
    }
}

/// Softmax weights of one attention stage, `[head][row][col]`. Encoder stages
/// have token rows over point columns; the decoder has point rows over token
/// columns, summed over bands into `heads x points x tokens`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn row(&self, head: usize, r: usize) -> &[f64] {
        let s = (head * self.rows + r) * self.cols;
        &self.weights[s..s + self.cols]
    }

    /// Head-averaged row.
    pub fn mean_row(&self, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for h in 0..self.heads {
            for (o, w) in out.iter_mut().zip(self.row(h, r)) {
                *o += w / self.heads as f64;
            }
        }
        out
    }

    /// Mean entropy (nats) over all rows and heads.
    pub fn mean_entropy(&self) -> f64 {
        let n = self.heads * self.rows;
        self.weights.chunks(self.cols).map(entropy).sum::<f64>() / n.max(1) as f64
    }
}

pub fn attention_map(model: &Model, snap: &FieldSnapshot, stage: AttentionStage) -> LabResult<AttentionMap> {
    let enc = &model.autoencoder.encoder;
    match stage {
        AttentionStage::Geometry | AttentionStage::Observation => {
            let mut g = Graph::inference(&model.store);
            let vars = enc.forward(&mut g, snap, EncodeMode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
            let var = match stage {
                AttentionStage::Geometry => vars
                    .geometry_attention
                    .ok_or_else(|| LabError::Config("this encoder has no geometry pass".into()))?,
                _ => vars.observation_attention,
            };
            let heads = enc.config().cross_heads;
            let weights = g.attention_probs(var).expect("attention node").to_vec();
            Ok(AttentionMap {
                heads,
                rows: enc.config().num_latents,
                cols: snap.len(),
                weights,
            })
        }
        AttentionStage::Decoder => {
            let z = model.autoencoder.encode(&model.store, snap)?.z;
            decoder_attention(model, &z, snap.coords())
        }
    }
}

/// Decoder band attention of latents `z` at `coords`, averaged over bands.
pub fn decoder_attention(model: &Model, z: &Tensor, coords: &[f64]) -> LabResult<AttentionMap> {
    let dec = &model.autoencoder.decoder;
    let bands = dec.band_attention(&model.store, z, coords)?;
    let heads = dec.config().cross_heads;
    let q = coords.len() / dec.config().spatial_dim;
    let m = z.rows();
    let mut weights = vec![0.0; heads * q * m];
    for b in &bands {
        for (w, x) in weights.iter_mut().zip(b) {
            *w += x / bands.len() as f64;
        }
    }
    Ok(AttentionMap {
        heads,
        rows: q,
        cols: m,
        weights,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub token: usize,
    /// `sum_t (u_perturbed - u_base)^2` per point.
    pub energy: Vec<f64>,
    /// Decoder attention mass of the token at each point.
    pub attention: Vec<f64>,
    /// Energy share on the points with the top `top_fraction` attention.
    pub locality: f64,
    /// `|u_perturbed - u_base|` per replacement frame and point.
    pub delta: Vec<Vec<f64>>,
}

/// Replaces token `token` of the initial latents with the same token encoded
/// from each later frame `start + 1 ..= start + frames` and decodes on the
/// trajectory's grid.
pub fn token_perturbation(
    model: &Model,
    ds: &TrajectoryDataset,
    traj: usize,
    start: usize,
    frames: usize,
    token: usize,
    top_fraction: f64,
) -> LabResult<Perturbation> {
    let m = model.spec.autoencoder.encoder.num_latents;
    if token >= m {
        return Err(LabError::Config(format!("token {token} out of range for {m} tokens")));
    }
    if start + frames >= ds.manifest.n_time {
        return Err(LabError::InvalidWindow {
            window: start + frames + 1,
            n_time: ds.manifest.n_time,
        });
    }
    let coords = ds.coords_f64(traj);
    let z0 = model.autoencoder.encode(&model.store, &ds.snapshot(traj, start)?)?.z;
    let base = model.autoencoder.decode(&model.store, &z0, &coords)?;
    let mut energy = vec![0.0; base.len()];
    let mut delta = Vec::with_capacity(frames);
    for t in start + 1..=start + frames {
        let zt = model.autoencoder.encode(&model.store, &ds.snapshot(traj, t)?)?.z;
        let mut z = z0.clone();
        z.row_mut(token).copy_from_slice(zt.row(token));
        let out = model.autoencoder.decode(&model.store, &z, &coords)?;
        let d: Vec<f64> = out.data().iter().zip(base.data()).map(|(a, b)| a - b).collect();
        for (e, x) in energy.iter_mut().zip(&d) {
            *e += x * x;
        }
        delta.push(d.into_iter().map(f64::abs).collect());
    }
    let att = decoder_attention(model, &z0, &coords)?;
    let attention: Vec<f64> = (0..att.rows)
        .map(|q| (0..att.heads).map(|h| att.row(h, q)[token]).sum::<f64>() / att.heads as f64)
        .collect();
    // fold channels so energy and attention are both per point
    let c = model.spec.autoencoder.decoder.channels;
    let energy: Vec<f64> = energy.chunks(c).map(|e| e.iter().sum()).collect();
    let locality = locality_fraction(&energy, &attention, top_fraction);
    Ok(Perturbation {
        token,
        energy,
        attention,
        locality,
        delta,
    })
}

/// Posterior statistics over a trajectory and the stepper's prediction of it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDump {
    pub mu: Vec<Tensor>,
    pub log_sigma: Vec<Tensor>,
    pub predicted: Vec<Tensor>,
    /// Channels whose mean log-sigma is close to 0, i.e. at the prior.
    pub uninformative_channels: Vec<usize>,
}

pub fn latent_dump(model: &Model, ds: &TrajectoryDataset, traj: usize, start: usize, frames: usize, seed: u64) -> LabResult<LatentDump> {
    if frames == 0 || start + frames > ds.manifest.n_time {
        return Err(LabError::InvalidWindow {
            window: start + frames,
            n_time: ds.manifest.n_time,
        });
    }
    let mut mu = Vec::with_capacity(frames);
    let mut log_sigma = Vec::with_capacity(frames);
    for t in start..start + frames {
        let z = model.autoencoder.encode(&model.store, &ds.snapshot(traj, t)?)?;
        mu.push(z.mu);
        log_sigma.push(z.log_sigma);
    }
    let predicted = if model.refiner.is_some() {
        latent_rollout(model, mu[0].clone(), frames - 1, seed)?.0
    } else {
        Vec::new()
    };
    let h = mu[0].cols();
    let uninformative_channels = (0..h)
        .filter(|&c| {
            let vals: Vec<f64> = log_sigma.iter().flat_map(|l| (0..l.rows()).map(move |r| l.get(r, c))).collect();
            vals.iter().sum::<f64>() / vals.len() as f64 > -0.1
        })
        .collect();
    Ok(LatentDump {
        mu,
        log_sigma,
        predicted,
        uninformative_channels,
    })
}
