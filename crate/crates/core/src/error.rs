use alloc::string::String;

/// Failures raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("coordinate {value} (point {point}, axis {axis}) lies outside [0, 1)")]
    Domain { point: usize, axis: usize, value: f64 },
    #[error("observation set is empty")]
    EmptyObservationSet,
    #[error("invalid drop ratio {0}: must lie in [0, 1)")]
    InvalidRatio(f64),
    #[error("encoder produced non-finite latent statistics")]
    EncoderNumerical,
    #[error("refiner produced non-finite activations")]
    RefinerNumerical,
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("solver diverged on trajectory {trajectory} at t = {time}")]
    SolverDiverged { trajectory: usize, time: f64 },
    #[error("grid too sparse: {points} points retained, at least 8 required")]
    GridTooSparse { points: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = core::result::Result<T, Error>;
