//! Synthetic dataset generation: solver config in, dataset directory out.

use std::path::Path;

use aroma_core::datagen::{
    solve_burgers_trajectory, solve_vorticity2d_trajectory, BurgersConfig, Trajectories, Vorticity2DConfig,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::merge;
use crate::dataset::TrajectoryDataset;
use crate::error::{LabError, LabResult};

/// Dataset-level keys accepted next to the solver fields in one flat JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub keep_fraction: f64,
    /// Seed of the per-trajectory observation grids.
    pub grid_seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self::for_equation("burgers")
    }
}

impl SplitConfig {
    pub const KEYS: [&'static str; 4] = ["n_train", "n_test", "keep_fraction", "grid_seed"];

    pub fn for_equation(equation: &str) -> Self {
        match equation {
            "ns2d" => Self {
                n_train: 64,
                n_test: 8,
                keep_fraction: 1.0,
                grid_seed: None,
            },
            _ => Self {
                n_train: 256,
                n_test: 64,
                keep_fraction: 1.0,
                grid_seed: None,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SolverConfig {
    Burgers(BurgersConfig),
    Ns2d(Vorticity2DConfig),
}

impl SolverConfig {
    pub fn equation(&self) -> &'static str {
        match self {
            Self::Burgers(_) => "burgers",
            Self::Ns2d(_) => "ns2d",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Self::Burgers(c) => c.seed,
            Self::Ns2d(c) => c.seed,
        }
    }

    fn to_value(&self) -> Value {
        match self {
            Self::Burgers(c) => serde_json::to_value(c),
            Self::Ns2d(c) => serde_json::to_value(c),
        }
        .expect("solver configs serialize")
    }

    fn parent_resolution(&self) -> Vec<usize> {
        match self {
            Self::Burgers(c) => vec![c.n_space],
            Self::Ns2d(c) => vec![c.n_space, c.n_space],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub solver: SolverConfig,
    pub split: SplitConfig,
}

impl GenerateConfig {
    /// Splits one flat JSON object into solver fields and dataset keys. Keys
    /// absent from both are rejected.
    pub fn from_flat(equation: &str, flat: &Value) -> LabResult<Self> {
        let obj = flat
            .as_object()
            .ok_or_else(|| LabError::Config("data config must be a JSON object".into()))?;
        let mut split = serde_json::to_value(SplitConfig::for_equation(equation)).expect("serializes");
        let mut solver = serde_json::Map::new();
        for (k, v) in obj {
            if SplitConfig::KEYS.contains(&k.as_str()) {
                split[k] = v.clone();
            } else {
                solver.insert(k.clone(), v.clone());
            }
        }
        let split: SplitConfig =
            serde_json::from_value(split).map_err(|e| LabError::Config(format!("data config: {e}")))?;
        let solver = Value::Object(solver);
        let solver = match equation {
            "burgers" => SolverConfig::Burgers(solver_from(solver, BurgersConfig::default())?),
            "ns2d" => SolverConfig::Ns2d(solver_from(solver, Vorticity2DConfig::default())?),
            other => return Err(LabError::Config(format!("unknown equation {other:?} (burgers, ns2d)"))),
        };
        Ok(Self { solver, split })
    }

    /// The flat JSON this config was read from, with defaults filled in.
    pub fn to_flat(&self) -> Value {
        let mut v = self.solver.to_value();
        merge(&mut v, serde_json::to_value(&self.split).expect("serializes"));
        v
    }
}

fn solver_from<T: Serialize + for<'de> Deserialize<'de>>(fields: Value, default: T) -> LabResult<T> {
    let mut base = serde_json::to_value(default).expect("serializes");
    if let Some(obj) = fields.as_object() {
        for k in obj.keys() {
            if base.get(k).is_none() {
                return Err(LabError::Config(format!("unknown data config key {k:?}")));
            }
        }
    }
    merge(&mut base, fields);
    serde_json::from_value(base).map_err(|e| LabError::Config(format!("data config: {e}")))
}

/// Integrates all trajectories in parallel; each is keyed by `(seed, index)`
/// so the result does not depend on scheduling.
pub fn solve(cfg: &SolverConfig, n_traj: usize) -> LabResult<Trajectories> {
    let frames: Vec<Vec<f64>> = (0..n_traj as u64)
        .into_par_iter()
        .map(|i| match cfg {
            SolverConfig::Burgers(c) => solve_burgers_trajectory(c, i),
            SolverConfig::Ns2d(c) => solve_vorticity2d_trajectory(c, i),
        })
        .collect::<Result<_, _>>()?;
    let (n_time, n_points, spatial_dim, coords, times) = match cfg {
        SolverConfig::Burgers(c) => (
            c.n_time,
            c.n_space,
            1,
            c.unit_coords(),
            (0..c.n_time).map(|i| i as f64 * c.dt_save).collect(),
        ),
        SolverConfig::Ns2d(c) => (
            c.n_time,
            c.n_space * c.n_space,
            2,
            c.unit_coords(),
            (0..c.n_time).map(|i| i as f64 * c.dt_save).collect(),
        ),
    };
    Ok(Trajectories {
        n_traj,
        n_time,
        n_points,
        spatial_dim,
        channels: 1,
        u: frames.concat(),
        coords,
        times,
    })
}

pub fn generate(cfg: &GenerateConfig) -> LabResult<TrajectoryDataset> {
    let s = &cfg.split;
    if s.n_train + s.n_test == 0 {
        return Err(LabError::Config("n_train + n_test must be positive".into()));
    }
    let traj = solve(&cfg.solver, s.n_train + s.n_test)?;
    TrajectoryDataset::from_trajectories(
        cfg.solver.equation(),
        cfg.to_flat(),
        cfg.solver.parent_resolution(),
        &traj,
        s.keep_fraction,
        s.grid_seed.unwrap_or(cfg.solver.seed()),
        s.n_train,
    )
}

pub fn generate_to(cfg: &GenerateConfig, out: &Path) -> LabResult<TrajectoryDataset> {
    let ds = generate(cfg)?;
    ds.write(out)?;
    Ok(ds)
}
