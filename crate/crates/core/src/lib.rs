//! Text-guided masked-prediction speech pre-training at desk scale.
//!
//! The crate bundles a small reverse-mode differentiation engine, an MFCC front end,
//! k-means and adversarial (GAN) speech tokenizers, a convolution + transformer encoder
//! trained with multi-layer masked prediction, CTC fine-tuning, and a synthetic speech
//! corpus with exact alignments for end-to-end verification.
//!
//! Numeric code is generic over [`Real`]; the aliases below fix the scalar to `f64`, which
//! is what every model in the crate uses.

pub mod audio;
pub mod config;
pub mod ctc;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod gan;
pub mod kmeans;
pub mod nn;
pub mod pretrain;
pub mod real;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod util;

pub use error::{Error, Result};
pub use real::Real;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type ParamStore = nn::ParamStore<f64>;
pub type Adam = nn::Adam<f64>;
pub type Waveform = audio::Waveform<f64>;
pub type FeatureMatrix = audio::FeatureMatrix<f64>;
pub type Codebook = kmeans::Codebook<f64>;
