//! Two-stage beta-VAE training for 3D voxel shapes.
//!
//! Stage one trains a convolutional VAE with a large KLD weight so the
//! posterior stays close to `N(0, I)`; stage two freezes that encoder and
//! trains an independent decoder on resampled latent codes using the
//! reconstruction loss alone. The crate also provides latent arithmetic for
//! shape completion, Dice-based evaluation, and numerical checks of the
//! closed-form KLD expressions and gradients the method relies on.

pub mod data;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod kld_grad;
pub mod latent;
pub mod losses;
pub mod nn;
pub mod render;
pub mod rng;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
