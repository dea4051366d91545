//! Synthetic spectrogram editing with audio-prompted adapters.

mod error;

pub mod backbone;
pub mod conditioning;
pub mod diffusion;
pub mod editops;
pub mod metrics;
pub mod params;
pub mod synthdata;
pub mod training;

pub use error::{ApaError, Result};
