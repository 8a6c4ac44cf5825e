#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod datagen;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fft;
pub mod field;
pub mod fourier;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod refiner;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use decoder::{Decoder, DecoderConfig};
pub use encoder::{EncodeMode, Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use field::{FieldSnapshot, LatentTokens};
pub use model::{AutoEncoder, Regularization};
pub use params::{Grads, ParamId, ParamStore};
pub use refiner::{Refiner, RefinerConfig, StepperKind};
pub use tensor::Tensor;
