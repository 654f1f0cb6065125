//! K-space transformer for undersampled MRI reconstruction.
//!
//! Sampled k-space points are embedded as tokens, encoded with a transformer,
//! and decoded onto coordinate-queried spectrogram grids: a low-resolution
//! decoder with self- and cross-attention, then a high-resolution decoder
//! that alternates cross-attention with image-domain convolutional
//! refinement. Everything, including the reverse-mode autodiff that trains
//! it, lives in this crate.

pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod eval;
pub mod fourier;
pub mod io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod real;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
