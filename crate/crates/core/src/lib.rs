//! Tweet sentiment from transformer internals.
//!
//! A small transformer encoder is run over each tweet; the token-averaged
//! activations of its last four layers and the corner blocks of its attention
//! matrix form a fixed-length embedding that feeds a high-dropout MLP,
//! optionally as a k-fold majority-vote ensemble. A bag-of-words logistic regression serves
//! as the baseline.
//!
//! All numeric code is generic over [`Scalar`] (`f32` in production, `f64`
//! for gradient checks); the aliases below name the common instantiations.

pub mod baseline;
pub mod classifier;
pub mod corpus;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod io;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tokenizer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Encoder = encoder::EncoderParams<f32>;
pub type Encoder64 = encoder::EncoderParams<f64>;
pub type Trace = encoder::EncoderTrace<f32>;
pub type Mlp = classifier::MlpParams<f32>;
pub type Mlp64 = classifier::MlpParams<f64>;
pub type Head = classifier::HeadParams<f32>;
pub type Head64 = classifier::HeadParams<f64>;
pub type Ensemble = ensemble::Ensemble<f32>;
pub type LogReg = baseline::LogRegParams<f32>;
pub type LogReg64 = baseline::LogRegParams<f64>;
