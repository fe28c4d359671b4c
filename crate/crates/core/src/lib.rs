//! Frequency-energy mechanics for a toy DDPM pipeline: DoG band
//! decomposition, bandwise energy indicators, soft routing over low-rank
//! adapter experts, a frequency-energy consistency loss, and the training
//! and analysis machinery around them.

pub mod adapters;
pub mod autodiff;
pub mod error;
pub mod checks;
pub mod datagen;
pub mod diffusion;
pub mod fft;
pub mod field;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod routing;
pub mod spectrum;
pub mod objective;
pub mod real;
pub mod rng;

pub use error::{FeraError, Result};
pub use field::Field;
pub use kernel::Kernel2D;
pub use real::Real;
