//! Observations of a physical field and their latent compression.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Observations `(x_i, u(x_i))` of one state on an arbitrary point set.
/// Coordinates are point-major `N x spatial_dim`, values `N x channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSnapshot {
    coords: Vec<f64>,
    values: Vec<f64>,
    spatial_dim: usize,
    channels: usize,
}

/// Rejects coordinates outside `[0, 1)^dim`.
pub fn check_domain(coords: &[f64], spatial_dim: usize) -> Result<()> {
    for (i, &x) in coords.iter().enumerate() {
        if !(0.0..1.0).contains(&x) {
            return Err(Error::Domain {
                point: i / spatial_dim,
                axis: i % spatial_dim,
                value: x,
            });
        }
    }
    Ok(())
}

impl FieldSnapshot {
    pub fn new(coords: Vec<f64>, values: Vec<f64>, spatial_dim: usize, channels: usize) -> Result<Self> {
        if spatial_dim == 0 || channels == 0 {
            return Err(Error::Shape("spatial_dim and channels must be positive".into()));
        }
        if !coords.len().is_multiple_of(spatial_dim) {
            return Err(Error::Shape(format!(
                "{} coordinates do not divide into {spatial_dim}-d points",
                coords.len()
            )));
        }
        let n = coords.len() / spatial_dim;
        if values.len() != n * channels {
            return Err(Error::Shape(format!(
                "{} values for {n} points with {channels} channels",
                values.len()
            )));
        }
        check_domain(&coords, spatial_dim)?;
        Ok(Self {
            coords,
            values,
            spatial_dim,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.spatial_dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn spatial_dim(&self) -> usize {
        self.spatial_dim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_tensor(&self) -> Tensor {
        Tensor::from_vec(self.len(), self.channels, self.values.clone())
    }

    /// Subset of points, in the order given.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut coords = Vec::with_capacity(indices.len() * self.spatial_dim);
        let mut values = Vec::with_capacity(indices.len() * self.channels);
        for &i in indices {
            coords.extend_from_slice(&self.coords[i * self.spatial_dim..(i + 1) * self.spatial_dim]);
            values.extend_from_slice(&self.values[i * self.channels..(i + 1) * self.channels]);
        }
        Self {
            coords,
            values,
            spatial_dim: self.spatial_dim,
            channels: self.channels,
        }
    }

    /// Same grid, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.coords.clone(), values, self.spatial_dim, self.channels)
    }
}

/// `M x h` latent tokens with their Gaussian statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTokens {
    pub z: Tensor,
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl LatentTokens {
    pub fn num_tokens(&self) -> usize {
        self.z.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.z.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.z.all_finite() && self.mu.all_finite() && self.log_sigma.all_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_validates_shapes_and_domain() {
        assert!(FieldSnapshot::new(vec![0.0, 0.5], vec![1.0, 2.0], 1, 1).is_ok());
        assert!(matches!(
            FieldSnapshot::new(vec![0.0, 1.0], vec![1.0, 2.0], 1, 1),
            Err(Error::Domain { point: 1, .. })
        ));
        assert!(matches!(
            FieldSnapshot::new(vec![0.0, 0.5], vec![1.0], 1, 1),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            FieldSnapshot::new(vec![-0.1], vec![1.0], 1, 1),
            Err(Error::Domain { .. })
        ));
    }
}
