//! Conditioned music source separation on complex spectrograms.
//!
//! This crate is `no_std` (it needs `alloc`) and holds every numeric piece of
//! the system: a small reverse-mode tensor engine, the STFT pipeline, the
//! latent-source attentive frequency transformation blocks (LaSAFT and
//! LightSAFT), the conditioned U-Net in its three variants, the training
//! primitives, and SDR scoring. File formats, timing and the command line live
//! in the `lightsaft` companion crate.

#![no_std]

extern crate alloc;

pub mod blocks;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod params;
pub mod scalar;
pub mod spectro;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;
