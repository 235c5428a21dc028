//! VAE-conditioned sequence-to-sequence speech synthesis with an
//! unsupervised latent style space.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, reverse-mode autodiff, parameters, RNG.
//! * [`audio`]: STFT, mel filterbank, Griffin-Lim, file formats.
//! * [`corpus`]: synthetic style-parameterised utterances and batching.
//! * [`model`]: reference encoder, latent heads, text encoder, location
//!   sensitive attention, autoregressive decoder and postnet.
//! * [`training`]: loss assembly, KL annealing/gating, the training loop.
//! * [`style`]: latent-space control, style transfer and spectrogram probes.

pub mod audio;
pub mod config;
pub mod corpus;
pub mod error;
pub mod model;
pub mod numerics;
pub mod style;
pub mod training;

pub use error::{Error, Result};
