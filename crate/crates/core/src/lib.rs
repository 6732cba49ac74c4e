//! Unsupervised separation of overlapping heart and lung sounds with a
//! variational autoencoder trained on log-magnitude spectrogram frames.

pub mod dsp;
pub mod cli;
pub mod error;
pub mod io;
pub mod latent;
pub mod nngrad;
pub mod separate;
pub mod siggen;
pub mod vae;

pub use error::{Error, Result};
