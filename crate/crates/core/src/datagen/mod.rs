//! Synthetic trajectories from pseudo-spectral solvers.

pub mod burgers;
pub mod grid;
pub mod vorticity;

pub use burgers::{solve_burgers, solve_burgers_trajectory, BurgersConfig};
pub use grid::{kept_count, subsample_grid, GridSpec};
pub use vorticity::{solve_vorticity2d, solve_vorticity2d_trajectory, Vorticity2DConfig};

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Solver output on one shared regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectories {
    pub n_traj: usize,
    pub n_time: usize,
    pub n_points: usize,
    pub spatial_dim: usize,
    pub channels: usize,
    /// `n_traj x n_time x n_points x channels`.
    pub u: Vec<f64>,
    /// `n_points x spatial_dim`.
    pub coords: Vec<f64>,
    pub times: Vec<f64>,
}

impl Trajectories {
    pub fn frame(&self, traj: usize, t: usize) -> &[f64] {
        let len = self.n_points * self.channels;
        let start = (traj * self.n_time + t) * len;
        &self.u[start..start + len]
    }
}

/// Independent stream per trajectory so generation order does not matter.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
