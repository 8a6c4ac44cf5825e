//! On-disk trajectory container.
//!
//! A dataset directory holds `manifest.json` and three little-endian `f32`
//! blobs: `u.bin` `[n_traj, n_time, N, C]`, `coords.bin` `[n_traj, N, dim]`
//! and `times.bin` `[n_time]`.

use std::fs;
use std::path::Path;

use aroma_core::datagen::{subsample_grid, Trajectories};
use aroma_core::FieldSnapshot;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, LabResult};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "aroma-lab/trajectory-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// Per-channel affine normalization fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose spread was zero; their scale is 1.
    pub zero_variance: Vec<bool>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            zero_variance: vec![false; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Values are point-major with `channels` entries per point.
    pub fn normalize(&self, values: &mut [f64]) {
        let c = self.channels();
        for (i, v) in values.iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
    }

    pub fn denormalize(&self, values: &mut [f64]) {
        let c = self.channels();
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Holds out the last tenth (at least one) of the training trajectories.
    pub fn train_validation(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.train.len();
        let held = if n < 2 { 0 } else { n.div_ceil(10) };
        (self.train[..n - held].to_vec(), self.train[n - held..].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub equation: String,
    /// Solver config echo.
    pub config: Value,
    /// `"artifact-default"` for generator choices not pinned elsewhere.
    pub provenance: String,
    pub n_traj: usize,
    pub n_time: usize,
    pub n_points: usize,
    pub spatial_dim: usize,
    pub channels: usize,
    pub parent_resolution: Vec<usize>,
    pub keep_fraction: f64,
    pub grid_seed: u64,
    pub arrays: Vec<ArrayInfo>,
    pub normalization: Option<NormStats>,
    pub splits: Splits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub manifest: DatasetManifest,
    u: Vec<f32>,
    coords: Vec<f32>,
    times: Vec<f32>,
}

fn array_infos(m: &DatasetManifest) -> Vec<ArrayInfo> {
    let info = |name: &str, shape: Vec<usize>| ArrayInfo {
        name: name.into(),
        file: format!("{name}.bin"),
        shape,
        dtype: "f32".into(),
    };
    vec![
        info("u", vec![m.n_traj, m.n_time, m.n_points, m.channels]),
        info("coords", vec![m.n_traj, m.n_points, m.spatial_dim]),
        info("times", vec![m.n_time]),
    ]
}

fn grid_seed_for(seed: u64, traj: usize) -> u64 {
    seed ^ (traj as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl TrajectoryDataset {
    /// Validates shapes, finiteness and the coordinate domain.
    pub fn new(mut manifest: DatasetManifest, u: Vec<f32>, coords: Vec<f32>, times: Vec<f32>) -> LabResult<Self> {
        manifest.format = FORMAT.into();
        manifest.version = 1;
        manifest.arrays = array_infos(&manifest);
        let ds = Self {
            manifest,
            u,
            coords,
            times,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> LabResult<()> {
        let m = &self.manifest;
        let expected = array_infos(m);
        if m.arrays != expected {
            return Err(LabError::Format("manifest array table does not match its dimensions".into()));
        }
        for (info, len) in expected.iter().zip([self.u.len(), self.coords.len(), self.times.len()]) {
            let want: usize = info.shape.iter().product();
            if want != len {
                return Err(LabError::Format(format!(
                    "array {} has {len} values but its shape {:?} needs {want}",
                    info.name, info.shape
                )));
            }
        }
        if !self.u.iter().chain(&self.times).all(|v| v.is_finite()) {
            return Err(LabError::Format("non-finite values in stored arrays".into()));
        }
        if !self.coords.iter().all(|c| (0.0..1.0).contains(c)) {
            return Err(LabError::Format("coordinates outside [0, 1)".into()));
        }
        let all = m.splits.train.iter().chain(&m.splits.test);
        if let Some(bad) = all.clone().find(|&&i| i >= m.n_traj) {
            return Err(LabError::Format(format!("split index {bad} out of range")));
        }
        Ok(())
    }

    /// Packs solver output. With `keep_fraction < 1` every trajectory gets its
    /// own random subset of the parent grid, fixed along time.
    pub fn from_trajectories(
        equation: &str,
        config: Value,
        parent_resolution: Vec<usize>,
        traj: &Trajectories,
        keep_fraction: f64,
        grid_seed: u64,
        n_train: usize,
    ) -> LabResult<Self> {
        if n_train > traj.n_traj {
            return Err(LabError::Config(format!(
                "{n_train} training trajectories requested from {}",
                traj.n_traj
            )));
        }
        let c = traj.channels;
        let mut u = Vec::new();
        let mut coords = Vec::new();
        let mut n_points = traj.n_points;
        for i in 0..traj.n_traj {
            let keep: Vec<usize> = if keep_fraction < 1.0 {
                subsample_grid(&parent_resolution, keep_fraction, grid_seed_for(grid_seed, i))?.indices
            } else {
                if keep_fraction != 1.0 {
                    subsample_grid(&parent_resolution, keep_fraction, grid_seed)?;
                }
                (0..traj.n_points).collect()
            };
            n_points = keep.len();
            for &p in &keep {
                let s = p * traj.spatial_dim;
                coords.extend(traj.coords[s..s + traj.spatial_dim].iter().map(|&x| x as f32));
            }
            for t in 0..traj.n_time {
                let f = traj.frame(i, t);
                for &p in &keep {
                    u.extend(f[p * c..(p + 1) * c].iter().map(|&x| x as f32));
                }
            }
        }
        let mut manifest = DatasetManifest {
            format: FORMAT.into(),
            version: 1,
            equation: equation.into(),
            config,
            provenance: "artifact-default".into(),
            n_traj: traj.n_traj,
            n_time: traj.n_time,
            n_points,
            spatial_dim: traj.spatial_dim,
            channels: c,
            parent_resolution,
            keep_fraction,
            grid_seed,
            arrays: Vec::new(),
            normalization: None,
            splits: Splits {
                train: (0..n_train).collect(),
                test: (n_train..traj.n_traj).collect(),
            },
        };
        manifest.arrays = array_infos(&manifest);
        let times = traj.times.iter().map(|&t| t as f32).collect();
        let mut ds = Self::new(manifest, u, coords, times)?;
        ds.manifest.normalization = Some(ds.fit_normalization(&ds.manifest.splits.train.clone()));
        Ok(ds)
    }

    pub fn write(&self, dir: &Path) -> LabResult<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        for (info, data) in self.manifest.arrays.iter().zip([&self.u, &self.coords, &self.times]) {
            write_f32(&dir.join(&info.file), data)?;
        }
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| LabError::json(dir.join(MANIFEST), e))?;
        let path = dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| LabError::io(&path, e))
    }

    pub fn read(dir: &Path) -> LabResult<Self> {
        let path = dir.join(MANIFEST);
        if !path.is_file() {
            return Err(LabError::dependency("dataset", dir));
        }
        let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| LabError::json(&path, e))?;
        if manifest.format != FORMAT {
            return Err(LabError::Format(format!("{} is not a trajectory dataset", dir.display())));
        }
        let mut blobs = Vec::new();
        for info in &manifest.arrays {
            blobs.push(read_f32(&dir.join(&info.file))?);
        }
        let [u, coords, times]: [Vec<f32>; 3] = blobs
            .try_into()
            .map_err(|_| LabError::Format("manifest must list exactly u, coords and times".into()))?;
        let ds = Self {
            manifest,
            u,
            coords,
            times,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn frame_len(&self) -> usize {
        self.manifest.n_points * self.manifest.channels
    }

    /// Raw stored values of one frame.
    pub fn frame(&self, traj: usize, t: usize) -> &[f32] {
        let len = self.frame_len();
        let start = (traj * self.manifest.n_time + t) * len;
        &self.u[start..start + len]
    }

    pub fn frame_f64(&self, traj: usize, t: usize) -> Vec<f64> {
        self.frame(traj, t).iter().map(|&v| v as f64).collect()
    }

    pub fn coords(&self, traj: usize) -> &[f32] {
        let len = self.manifest.n_points * self.manifest.spatial_dim;
        &self.coords[traj * len..(traj + 1) * len]
    }

    pub fn coords_f64(&self, traj: usize) -> Vec<f64> {
        self.coords(traj).iter().map(|&v| v as f64).collect()
    }

    pub fn times(&self) -> &[f32] {
        &self.times
    }

    pub fn raw_u(&self) -> &[f32] {
        &self.u
    }

    pub fn norm(&self) -> NormStats {
        self.manifest
            .normalization
            .clone()
            .unwrap_or_else(|| NormStats::identity(self.manifest.channels))
    }

    /// Frame `t` of `traj` on its grid, normalized with the manifest stats.
    pub fn snapshot(&self, traj: usize, t: usize) -> LabResult<FieldSnapshot> {
        let mut values = self.frame_f64(traj, t);
        self.norm().normalize(&mut values);
        Ok(FieldSnapshot::new(
            self.coords_f64(traj),
            values,
            self.manifest.spatial_dim,
            self.manifest.channels,
        )?)
    }

    /// Per-channel mean and population std over the given trajectories.
    pub fn fit_normalization(&self, trajs: &[usize]) -> NormStats {
        let c = self.manifest.channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut n = 0usize;
        for &i in trajs {
            for t in 0..self.manifest.n_time {
                for (j, &v) in self.frame(i, t).iter().enumerate() {
                    sum[j % c] += v as f64;
                    sq[j % c] += (v as f64) * (v as f64);
                }
                n += self.manifest.n_points;
            }
        }
        let mut stats = NormStats::identity(c);
        if n == 0 {
            return stats;
        }
        for ch in 0..c {
            let mean = sum[ch] / n as f64;
            let std = (sq[ch] / n as f64 - mean * mean).max(0.0).sqrt();
            stats.mean[ch] = mean;
            if std > 1e-12 * mean.abs().max(1.0) {
                stats.std[ch] = std;
            } else {
                stats.zero_variance[ch] = true;
            }
        }
        stats
    }

    /// Keeps a random fraction of every trajectory's points, one grid per
    /// trajectory. Only valid on a full-grid dataset.
    pub fn subsample(&self, keep_fraction: f64, grid_seed: u64) -> LabResult<Self> {
        let m = &self.manifest;
        if m.keep_fraction != 1.0 || m.n_points != m.parent_resolution.iter().product::<usize>() {
            return Err(LabError::Config("only full-grid datasets can be subsampled".into()));
        }
        let c = m.channels;
        let mut u = Vec::new();
        let mut coords = Vec::new();
        let mut n_points = 0;
        for i in 0..m.n_traj {
            let keep = subsample_grid(&m.parent_resolution, keep_fraction, grid_seed_for(grid_seed, i))?.indices;
            n_points = keep.len();
            let grid = self.coords(i);
            for &p in &keep {
                coords.extend_from_slice(&grid[p * m.spatial_dim..(p + 1) * m.spatial_dim]);
            }
            for t in 0..m.n_time {
                let f = self.frame(i, t);
                for &p in &keep {
                    u.extend_from_slice(&f[p * c..(p + 1) * c]);
                }
            }
        }
        let manifest = DatasetManifest {
            n_points,
            keep_fraction,
            grid_seed,
            ..m.clone()
        };
        let mut ds = Self::new(manifest, u, coords, self.times.clone())?;
        ds.manifest.normalization = Some(ds.fit_normalization(&ds.manifest.splits.train.clone()));
        Ok(ds)
    }
}

pub fn write_f32(path: &Path, data: &[f32]) -> LabResult<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn read_f32(path: &Path) -> LabResult<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(LabError::Format(format!("{} is not a whole number of f32 values", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// A contiguous run of frames treated as an independent trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
    pub len: usize,
}

/// Non-overlapping windows, `floor(n_time / window)` per trajectory.
pub fn slice_subtrajectories(n_time: usize, trajs: &[usize], window: usize) -> LabResult<Vec<Window>> {
    if window == 0 || window > n_time {
        return Err(LabError::InvalidWindow { window, n_time });
    }
    Ok(trajs
        .iter()
        .flat_map(|&traj| {
            (0..n_time / window).map(move |w| Window {
                traj,
                start: w * window,
                len: window,
            })
        })
        .collect())
}

/// Frames `t` and `t + 1` of one trajectory (absolute indices).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairIndex {
    pub traj: usize,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatePair {
    pub u_t: FieldSnapshot,
    pub u_next: FieldSnapshot,
}

fn usable(w: &Window, horizon: Option<usize>) -> usize {
    horizon.map_or(w.len, |h| h.min(w.len))
}

/// Every pair whose two frames lie inside the first `horizon` frames of a
/// window.
pub fn enumerate_pairs(windows: &[Window], horizon: Option<usize>) -> Vec<PairIndex> {
    windows
        .iter()
        .flat_map(|w| {
            let n = usable(w, horizon);
            (0..n.saturating_sub(1)).map(move |dt| PairIndex {
                traj: w.traj,
                t: w.start + dt,
            })
        })
        .collect()
}

/// Uniform draws over `(window, t)` with `t + 1` inside the horizon.
pub fn sample_pairs<R: Rng + ?Sized>(
    windows: &[Window],
    horizon: Option<usize>,
    batch: usize,
    rng: &mut R,
) -> LabResult<Vec<PairIndex>> {
    let counts: Vec<usize> = windows.iter().map(|w| usable(w, horizon).saturating_sub(1)).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(LabError::NoPairsAvailable(format!(
            "{} windows with horizon {horizon:?}",
            windows.len()
        )));
    }
    Ok((0..batch)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            let mut i = 0;
            while k >= counts[i] {
                k -= counts[i];
                i += 1;
            }
            PairIndex {
                traj: windows[i].traj,
                t: windows[i].start + k,
            }
        })
        .collect())
}

impl TrajectoryDataset {
    pub fn pair(&self, p: PairIndex) -> LabResult<StatePair> {
        Ok(StatePair {
            u_t: self.snapshot(p.traj, p.t)?,
            u_next: self.snapshot(p.traj, p.t + 1)?,
        })
    }
}
