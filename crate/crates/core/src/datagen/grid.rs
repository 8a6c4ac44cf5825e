//! Random observation subsets of a regular grid.

use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;

pub const MIN_GRID_POINTS: usize = 8;

/// A subset of a regular grid. `indices` are row-major positions in the
/// parent grid, ascending; `coords` are the matching points in `[0, 1)^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub parent_resolution: Vec<usize>,
    pub keep_fraction: f64,
    pub indices: Vec<usize>,
    pub coords: Vec<f64>,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn spatial_dim(&self) -> usize {
        self.parent_resolution.len()
    }
}

/// Number of kept points, `round(fraction * total)` with ties to even.
pub fn kept_count(fraction: f64, total: usize) -> usize {
    math::round_ties_even(fraction * total as f64) as usize
}

/// Coordinates of row-major grid position `flat`.
pub fn grid_point(resolution: &[usize], mut flat: usize, out: &mut Vec<f64>) {
    let start = out.len();
    out.resize(start + resolution.len(), 0.0);
    for (axis, &n) in resolution.iter().enumerate().rev() {
        out[start + axis] = (flat % n) as f64 / n as f64;
        flat /= n;
    }
}

pub fn subsample_grid(parent_resolution: &[usize], fraction: f64, seed: u64) -> Result<GridSpec> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidRatio(fraction));
    }
    if parent_resolution.is_empty() || parent_resolution.contains(&0) {
        return Err(Error::Config("parent resolution must be non-empty and positive".into()));
    }
    let total: usize = parent_resolution.iter().product();
    let count = kept_count(fraction, total).min(total);
    if count < MIN_GRID_POINTS {
        return Err(Error::GridTooSparse { points: count });
    }
    let mut indices: Vec<usize> = if count == total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        index::sample(&mut rng, total, count).into_vec()
    };
    indices.sort_unstable();
    let mut coords = Vec::with_capacity(count * parent_resolution.len());
    for &i in &indices {
        grid_point(parent_resolution, i, &mut coords);
    }
    Ok(GridSpec {
        parent_resolution: parent_resolution.to_vec(),
        keep_fraction: fraction,
        indices,
        coords,
    })
}
