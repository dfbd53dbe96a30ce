//! Graph-convolutional image denoising.
//!
//! A residual denoiser whose layers mix a local 3×3 convolution with an
//! edge-conditioned convolution over a dynamically built non-local graph:
//! each pixel aggregates the `k` pixels with the most similar hidden
//! features inside a search window, weighted by matrices that a small
//! filter-generating network produces from the feature differences.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ecc;
pub mod error;
pub mod eval;
pub mod graph;
pub mod layer;
pub mod network;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
