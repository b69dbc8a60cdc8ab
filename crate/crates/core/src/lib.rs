//! Non-autoregressive acoustic model: phoneme encoder, variational residual
//! encoders, duration model, duration-driven upsampling and a lightweight
//! convolution spectrogram decoder with per-block iterative loss, built on a
//! small reverse-mode autodiff engine.

pub mod bench;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod duration;
pub mod encoder;
pub mod error;
pub mod gradcheck_suite;
pub mod io;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod upsample;
pub mod vae;

pub use error::{Error, Result};
